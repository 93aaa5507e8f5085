"""Deterministic synthetic corpora with engineered analogy structure.

Each relation owns a pool of signal tokens and entity surface forms; a
sentence is fillers + entities + signal tokens in randomized order. An
analogous pair (a, b) makes relation b reuse most of relation a's signal
tokens and its entity pools, so the two relations are confusable by
construction while every other pair is token-disjoint. Pair members are
placed in different tasks: contiguous relation blocks map to tasks, so a
pair (early_index, late_index) yields "learned early, challenged late"
structure that the analytics can measure against the generator's own links.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .data import RelationVocab, Sample, Task, TaskSequence, build_task_sequence
from .errors import DataError
from .seeding import numpy_rng

_FILLERS = (
    "the", "a", "of", "in", "was", "by", "and", "for", "with", "from",
    "on", "at", "its", "their", "which", "this", "that", "as", "is", "were",
)


@dataclass(frozen=True)
class SyntheticSpec:
    """Cluster-style description of a synthetic continual-RE corpus."""

    num_relations: int
    num_tasks: int
    samples_per_relation: int = 50
    analogous_pairs: tuple[tuple[int, int], ...] = ()
    seed: int = 0
    signal_pool_size: int = 8
    signal_per_sentence: int = 4
    entity_pool_size: int = 5
    shared_signal_fraction: float = 0.9
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)

    def __post_init__(self):
        object.__setattr__(self, "analogous_pairs", tuple(tuple(p) for p in self.analogous_pairs))
        if self.num_relations < 1:
            raise DataError("synthetic spec lists no relations")
        if self.num_tasks < 1 or self.num_tasks > self.num_relations:
            raise DataError(
                f"cannot split {self.num_relations} relations into {self.num_tasks} tasks"
            )
        if self.samples_per_relation < 2:
            raise DataError("need at least 2 samples per relation")
        for a, b in self.analogous_pairs:
            if not (0 <= a < self.num_relations and 0 <= b < self.num_relations):
                raise DataError(f"analogous pair ({a}, {b}) references unknown relations")
            if a == b:
                raise DataError(f"analogous pair ({a}, {b}) must link two distinct relations")
        if not 0.0 < self.shared_signal_fraction <= 1.0:
            raise DataError("shared_signal_fraction must lie in (0, 1]")

    def analogous_partner(self, relation: int) -> int | None:
        for a, b in self.analogous_pairs:
            if relation == a:
                return b
            if relation == b:
                return a
        return None


def _entity_pool(rng, kind: str, relation: int, size: int) -> list[tuple[str, ...]]:
    pool = []
    for i in range(size):
        form = [f"{kind}{relation}n{i}"]
        if rng.random() < 0.4:
            form.append(f"{kind}{relation}s{i}")  # occasional two-token entity
        pool.append(tuple(form))
    return pool


def _relation_pools(spec: SyntheticSpec):
    """Token pools per relation, with analogous pairs sharing most material."""
    signal: dict[int, list[str]] = {}
    heads: dict[int, list[tuple[str, ...]]] = {}
    tails: dict[int, list[tuple[str, ...]]] = {}
    fillers: dict[int, list[str]] = {}
    for r in range(spec.num_relations):
        rng = numpy_rng(spec.seed, "pools", r)
        signal[r] = [f"sig{r}w{i}" for i in range(spec.signal_pool_size)]
        heads[r] = _entity_pool(rng, "hd", r, spec.entity_pool_size)
        tails[r] = _entity_pool(rng, "tl", r, spec.entity_pool_size)
        # sliding window: nearby relations share some fillers, like real stopwords
        start = (3 * r) % len(_FILLERS)
        window = list(_FILLERS[start:start + 4])
        if len(window) < 4:
            window += list(_FILLERS[: 4 - len(window)])
        fillers[r] = window
    for a, b in spec.analogous_pairs:
        n_shared = min(spec.signal_pool_size, math.ceil(spec.shared_signal_fraction * spec.signal_pool_size))
        signal[b] = signal[a][:n_shared] + signal[b][n_shared:]
        heads[b] = list(heads[a])
        tails[b] = list(tails[a])
        fillers[b] = list(fillers[a])
    return signal, heads, tails, fillers


def _make_sentence(rng, head: tuple[str, ...], tail: tuple[str, ...], signal: list[str],
                   per_sentence: int, filler_pool: list[str]):
    def fillers(low, high):
        return [str(tok) for tok in rng.choice(filler_pool, size=int(rng.integers(low, high)))]

    chosen = [signal[i] for i in rng.choice(len(signal), size=min(per_sentence, len(signal)), replace=False)]
    segments = [
        fillers(1, 3),
        list(head),
        fillers(0, 2) + chosen[: len(chosen) // 2],
        chosen[len(chosen) // 2:],
        list(tail),
        fillers(0, 2),
    ]
    head_seg, tail_seg = 1, 4
    if rng.random() < 0.5:  # tail-before-head surface order
        segments[head_seg], segments[tail_seg] = segments[tail_seg], segments[head_seg]
        head_seg, tail_seg = tail_seg, head_seg
    tokens: list[str] = []
    spans = {}
    for i, segment in enumerate(segments):
        if i == head_seg:
            spans["head"] = (len(tokens), len(tokens) + len(segment))
        if i == tail_seg:
            spans["tail"] = (len(tokens), len(tokens) + len(segment))
        tokens.extend(segment)
    return tokens, spans["head"], spans["tail"]


def generate_synthetic_sequence(spec: SyntheticSpec) -> tuple[TaskSequence, RelationVocab]:
    """Build a deterministic task sequence from a synthetic spec.

    Relation ids equal spec indices and tasks take contiguous relation blocks,
    so analogous-pair placement across tasks is fixed by the pair indices.
    """
    vocab = RelationVocab([f"relation-{r}" for r in range(spec.num_relations)])
    signal, heads, tails, fillers = _relation_pools(spec)

    samples: list[Sample] = []
    for r in range(spec.num_relations):
        rng = numpy_rng(spec.seed, "sentences", r)
        for i in range(spec.samples_per_relation):
            head = heads[r][int(rng.integers(len(heads[r])))]
            tail = tails[r][int(rng.integers(len(tails[r])))]
            tokens, head_span, tail_span = _make_sentence(
                rng, head, tail, signal[r], spec.signal_per_sentence, fillers[r]
            )
            samples.append(
                Sample(
                    id=f"syn-r{r}-{i}",
                    tokens=tuple(tokens),
                    head_span=head_span,
                    tail_span=tail_span,
                    relation=r,
                )
            )

    block = [[] for _ in range(spec.num_tasks)]
    per_task = spec.num_relations / spec.num_tasks
    for r in range(spec.num_relations):
        block[min(int(r / per_task), spec.num_tasks - 1)].append(r)
    sequence = build_task_sequence(
        samples,
        num_tasks=spec.num_tasks,
        seed=spec.seed,
        split_ratios=spec.split_ratios,
        task_split=block,
    )
    return sequence, vocab
