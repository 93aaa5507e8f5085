"""Episodic memory: typical-sample selection, prototypes and augmentation.

Per relation, at most ``memory_size`` exemplars are kept: the training
samples are clustered with k-means over their representations and each
cluster contributes the sample nearest its centroid. Prototypes blend a
write-once static mean (captured over all training samples when a relation
is first learned) with the dynamic mean of the current exemplar encodings.
Augmentation quadruples the replay set via within-relation entity
replacement and cross-relation sentence concatenation; augmented samples
never feed selection or prototypes.
"""

from __future__ import annotations

import numpy as np
import torch

from .data import Provenance, Sample
from .errors import DataError, ProvenanceError, StateError
from .encoding import SEPARATOR
from .seeding import numpy_rng

KMEANS_MAX_ITERS = 50
KMEANS_TOL = 1e-6


def _require_original(samples, context: str) -> None:
    for sample in samples:
        if sample.provenance is not Provenance.ORIGINAL:
            raise ProvenanceError(
                f"{context} only accepts original samples; got {sample.provenance.value!r} ({sample.id!r})"
            )


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=points.dtype)
    centroids[0] = points[rng.integers(n)]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:  # all remaining points coincide with a centroid
            centroids[i] = points[rng.integers(n)]
            continue
        probs = closest / total
        centroids[i] = points[rng.choice(n, p=probs)]
        closest = np.minimum(closest, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans(points: np.ndarray, k: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Plain Lloyd iterations with k-means++ seeding; deterministic given seed."""
    if not 1 <= k <= points.shape[0]:
        raise DataError(f"k={k} invalid for {points.shape[0]} points")
    rng = numpy_rng(seed, "kmeans")
    centroids = _kmeans_pp_init(points, k, rng)
    assignments = np.zeros(points.shape[0], dtype=int)
    for _ in range(KMEANS_MAX_ITERS):
        distances = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assignments = distances.argmin(axis=1)
        new_centroids = centroids.copy()
        for j in range(k):
            members = points[assignments == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
            else:  # reseed an empty cluster on the farthest point
                new_centroids[j] = points[distances.min(axis=1).argmax()]
        shift = np.abs(new_centroids - centroids).max()
        centroids = new_centroids
        if shift < KMEANS_TOL:
            break
    distances = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assignments = distances.argmin(axis=1)
    return centroids, assignments


def select_typical(encoder, samples, memory_size: int, seed: int) -> list[Sample]:
    """Pick at most ``memory_size`` exemplars: per k-means cluster, the sample
    closest to the centroid (ties broken by lowest sample id)."""
    samples = list(samples)
    if not samples:
        raise DataError("cannot select typical samples from an empty list")
    relations = {s.relation for s in samples}
    if len(relations) != 1:
        raise DataError(f"typical-sample selection runs per relation; got {sorted(relations)}")
    _require_original(samples, "typical-sample selection")

    k = min(memory_size, len(samples))
    if k == len(samples):
        return samples
    with torch.no_grad():
        reps = encoder.encode_batch(samples).cpu().double().numpy()
    centroids, assignments = kmeans(reps, k, seed)
    selected = []
    for j in range(k):
        members = np.flatnonzero(assignments == j)
        if members.size == 0:
            continue
        dists = ((reps[members] - centroids[j]) ** 2).sum(axis=1)
        best = dists.min()
        candidates = members[dists <= best]
        chosen = min(candidates, key=lambda idx: samples[idx].id)
        selected.append(samples[chosen])
    return selected


class MemoryStore:
    """Per-relation exemplar sets plus the accumulated view over all seen relations."""

    def __init__(self, memory_size: int):
        if memory_size < 1:
            raise DataError(f"memory_size must be >= 1, got {memory_size}")
        self.memory_size = memory_size
        self._exemplars: dict[int, tuple[Sample, ...]] = {}

    def store(self, relation: int, exemplars) -> None:
        exemplars = list(exemplars)
        if not exemplars:
            raise DataError(f"relation {relation}: empty exemplar list")
        if len(exemplars) > self.memory_size:
            raise DataError(f"relation {relation}: {len(exemplars)} exemplars exceed memory size {self.memory_size}")
        _require_original(exemplars, "memory storage")
        for sample in exemplars:
            if sample.relation != relation:
                raise DataError(f"sample {sample.id!r} has relation {sample.relation}, expected {relation}")
        self._exemplars[relation] = tuple(exemplars)

    def exemplars(self, relation: int) -> tuple[Sample, ...]:
        try:
            return self._exemplars[relation]
        except KeyError:
            raise StateError(f"no exemplars stored for relation {relation}") from None

    @property
    def relations(self) -> tuple[int, ...]:
        return tuple(sorted(self._exemplars))

    def accumulated(self) -> list[Sample]:
        """All stored exemplars, ordered by relation id then storage order."""
        out: list[Sample] = []
        for relation in self.relations:
            out.extend(self._exemplars[relation])
        return out

    def __len__(self) -> int:
        return sum(len(v) for v in self._exemplars.values())

    def __contains__(self, relation: int) -> bool:
        return relation in self._exemplars

    def manifest(self) -> dict[int, list[str]]:
        return {r: [s.id for s in self._exemplars[r]] for r in self.relations}


class PrototypeStore:
    """Static means (write-once), and the per-task combined prototypes."""

    def __init__(self):
        self._static: dict[int, torch.Tensor] = {}
        self._combined: dict[int, torch.Tensor] = {}

    def set_static(self, relation: int, vector: torch.Tensor) -> None:
        if relation in self._static:
            raise StateError(f"static prototype for relation {relation} is write-once")
        self._static[relation] = vector.detach().clone()

    def has_static(self, relation: int) -> bool:
        return relation in self._static

    def static(self, relation: int) -> torch.Tensor:
        try:
            return self._static[relation]
        except KeyError:
            raise StateError(f"no static prototype for relation {relation}") from None

    def set_combined(self, relation: int, vector: torch.Tensor) -> None:
        self._combined[relation] = vector.detach().clone()

    def combined(self, relation: int) -> torch.Tensor:
        try:
            return self._combined[relation]
        except KeyError:
            raise StateError(f"no combined prototype for relation {relation}") from None

    @property
    def relations(self) -> tuple[int, ...]:
        return tuple(sorted(self._combined))

    def combined_matrix(self, order) -> torch.Tensor:
        return torch.stack([self.combined(r) for r in order], dim=0)

    def combined_map(self) -> dict[int, torch.Tensor]:
        return {r: v.clone() for r, v in self._combined.items()}

    def static_payload(self) -> dict[int, torch.Tensor]:
        return {r: v.clone() for r, v in self._static.items()}

    def load_static(self, payload: dict[int, torch.Tensor]) -> None:
        if self._static:
            raise StateError("static prototypes already present; refusing to overwrite")
        self._static = {int(r): v.detach().clone() for r, v in payload.items()}


def capture_static_prototype(store: PrototypeStore, encoder, relation: int, training_samples) -> torch.Tensor:
    """Mean representation over *all* the relation's training samples; stored write-once."""
    samples = list(training_samples)
    if not samples:
        raise DataError(f"relation {relation}: no training samples to average")
    _require_original(samples, "static prototype capture")
    if store.has_static(relation):
        raise StateError(f"static prototype for relation {relation} is write-once")
    with torch.no_grad():
        mean = encoder.encode_batch(samples).mean(dim=0)
    store.set_static(relation, mean)
    return mean


def combined_prototype(store: PrototypeStore, encoder, relation: int, memory: MemoryStore,
                       beta: float, mode: str = "combined") -> torch.Tensor:
    """Blend the static mean with the dynamic mean over current exemplar encodings.

    ``mode`` selects the ablations: "static_only" ignores the dynamic term,
    "dynamic_only" the static one. Endpoints are exact: beta=0 returns the
    static vector bitwise, beta=1 the dynamic mean.
    """
    if mode not in ("combined", "static_only", "dynamic_only"):
        raise DataError(f"unknown prototype mode {mode!r}")

    def dynamic_mean() -> torch.Tensor:
        exemplars = memory.exemplars(relation)
        _require_original(exemplars, "prototype generation")
        with torch.no_grad():
            return encoder.encode_batch(exemplars).mean(dim=0)

    if mode == "static_only":
        proto = store.static(relation).clone()
    elif mode == "dynamic_only":
        proto = dynamic_mean()
    elif beta == 0.0:
        proto = store.static(relation).clone()
    elif beta == 1.0:
        proto = dynamic_mean()
    else:
        proto = (1.0 - beta) * store.static(relation) + beta * dynamic_mean()
    store.set_combined(relation, proto)
    return proto


def _splice_entities(sample: Sample, donor: Sample, new_id: str) -> Sample:
    """Replace head and tail entity tokens with the donor's, adjusting spans."""
    (h0, h1), (t0, t1) = sample.head_span, sample.tail_span
    head_first = h0 <= t0
    (a0, a1), (b0, b1) = ((h0, h1), (t0, t1)) if head_first else ((t0, t1), (h0, h1))
    first_new = list(donor.head_tokens if head_first else donor.tail_tokens)
    second_new = list(donor.tail_tokens if head_first else donor.head_tokens)

    tokens = list(sample.tokens[:a0]) + first_new + list(sample.tokens[a1:b0]) + second_new + list(sample.tokens[b1:])
    first_span = (a0, a0 + len(first_new))
    delta = len(first_new) - (a1 - a0)
    second_span = (b0 + delta, b0 + delta + len(second_new))
    head_span, tail_span = (first_span, second_span) if head_first else (second_span, first_span)
    return Sample(
        id=new_id,
        tokens=tuple(tokens),
        head_span=head_span,
        tail_span=tail_span,
        relation=sample.relation,
        provenance=Provenance.ENTITY_REPLACED,
    )


def _concatenate(sample: Sample, appended: Sample, new_id: str, provenance: Provenance) -> Sample:
    """Append another sentence after a separator; spans stay in the first sentence."""
    return Sample(
        id=new_id,
        tokens=sample.tokens + (SEPARATOR,) + appended.tokens,
        head_span=sample.head_span,
        tail_span=sample.tail_span,
        relation=sample.relation,
        provenance=provenance,
    )


def augment(memory: MemoryStore, seed: int) -> list[Sample]:
    """Quadruple the accumulated memory: originals, entity-replaced,
    concatenated, and entity-replaced + concatenated variants.

    Concatenation material always comes from *other* relations' exemplar sets.
    A single-relation memory cannot be augmented; a singleton exemplar set
    falls back to self-replacement for the entity-replaced variant.
    """
    relations = memory.relations
    if len(relations) < 2:
        raise DataError("memory augmentation needs exemplars from at least 2 relations")
    rng = numpy_rng(seed, "augment")
    originals = memory.accumulated()
    replaced: list[Sample] = []
    concatenated: list[Sample] = []
    replaced_concat: list[Sample] = []
    for relation in relations:
        exemplars = memory.exemplars(relation)
        others = [s for s in originals if s.relation != relation]
        for i, sample in enumerate(exemplars):
            if len(exemplars) > 1:
                j = int(rng.integers(len(exemplars) - 1))
                donor = exemplars[j if j < i else j + 1]
            else:
                donor = sample  # singleton set: self-replacement keeps the 4x count
            swapped = _splice_entities(sample, donor, f"{sample.id}+ent:{donor.id}")
            replaced.append(swapped)

            if len(others) >= 2:
                m_idx, n_idx = rng.choice(len(others), size=2, replace=False)
            else:
                m_idx = n_idx = 0
            appended_m = others[int(m_idx)]
            appended_n = others[int(n_idx)]
            concatenated.append(
                _concatenate(sample, appended_m, f"{sample.id}+cat:{appended_m.id}", Provenance.CONCATENATED)
            )
            replaced_concat.append(
                _concatenate(swapped, appended_n, f"{swapped.id}+cat:{appended_n.id}",
                             Provenance.REPLACED_AND_CONCATENATED)
            )
    return originals + replaced + concatenated + replaced_concat
