"""Classification heads: an expanding bias-free linear classifier and the
L2-normalized projection head used by the contrastive objective."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, NumericsError, StateError
from .seeding import torch_generator

NEW_ROW_STD = 0.02


class ExpandingLinearClassifier(nn.Module):
    """Bias-free softmax classifier whose rows grow with the seen relations.

    Row order is append-only: expansion never moves an existing relation's
    row, so old-relation predictions stay index-stable across tasks.
    """

    def __init__(self, dim: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.dim = dim
        self.weight = nn.Parameter(torch.zeros((0, dim), dtype=dtype))
        self._relations: list[int] = []
        self._row_of: dict[int, int] = {}

    @property
    def relations(self) -> tuple[int, ...]:
        return tuple(self._relations)

    @property
    def num_relations(self) -> int:
        return len(self._relations)

    def row_of(self, relation: int) -> int:
        try:
            return self._row_of[relation]
        except KeyError:
            raise StateError(f"relation {relation} has no classifier row") from None

    def expand(self, new_relations, generator: torch.Generator) -> "ExpandingLinearClassifier":
        """Append rows for unseen relations; existing rows are untouched."""
        new_relations = list(new_relations)
        duplicates = [r for r in new_relations if r in self._row_of]
        if duplicates:
            raise StateError(f"relations already present in classifier: {duplicates}")
        if len(set(new_relations)) != len(new_relations):
            raise StateError(f"duplicate relations in expansion request: {new_relations}")
        if not new_relations:
            return self
        fresh = torch.randn((len(new_relations), self.dim), generator=generator,
                            dtype=self.weight.dtype) * NEW_ROW_STD
        self.weight = nn.Parameter(torch.cat([self.weight.detach(), fresh], dim=0))
        for relation in new_relations:
            self._row_of[relation] = len(self._relations)
            self._relations.append(relation)
        return self

    def logits(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.dim:
            raise DataError(f"representation width {h.shape[-1]} != classifier width {self.dim}")
        return h @ self.weight.T

    def probs(self, h: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(h), dim=-1)

    def rows_for(self, relations) -> torch.Tensor:
        return torch.tensor([self.row_of(r) for r in relations], dtype=torch.long)

    def state_payload(self) -> dict:
        return {"weight": self.weight.detach().clone(), "relations": list(self._relations)}

    @classmethod
    def from_payload(cls, payload: dict, dtype: torch.dtype) -> "ExpandingLinearClassifier":
        clf = cls(payload["weight"].shape[1], dtype=dtype)
        clf.weight = nn.Parameter(payload["weight"].to(dtype).clone())
        clf._relations = list(payload["relations"])
        clf._row_of = {r: i for i, r in enumerate(clf._relations)}
        return clf


class ProjectionHead(nn.Module):
    """Two-layer MLP to the contrastive space, output L2-normalized."""

    def __init__(self, dim: int, proj_dim: int = 64, dtype: torch.dtype = torch.float64, seed: int = 0):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim, dtype=dtype)
        self.fc2 = nn.Linear(dim, proj_dim, dtype=dtype)
        gen = torch_generator(seed, "projector")
        for param in self.parameters():
            with torch.no_grad():
                param.copy_(torch.randn(param.shape, generator=gen, dtype=dtype) * 0.1)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        out = self.fc2(F.gelu(self.fc1(h)))
        norms = out.norm(dim=-1, keepdim=True)
        if bool((norms == 0).any()):
            raise NumericsError("projection head produced an exactly zero vector; normalization undefined")
        return out / norms


def linear_probs(classifier: ExpandingLinearClassifier, h: torch.Tensor) -> torch.Tensor:
    """Softmax distribution over the seen relations."""
    return classifier.probs(h)


def contrastive_probs(z: torch.Tensor, prototypes: torch.Tensor,
                      expected_rows: int | None = None) -> torch.Tensor:
    """Softmax over prototype similarities (no temperature).

    ``prototypes`` rows must be unit vectors in the projection space.
    """
    if expected_rows is not None and prototypes.shape[0] != expected_rows:
        raise DataError(f"{prototypes.shape[0]} prototype rows for {expected_rows} seen relations")
    row_norms = prototypes.detach().norm(dim=-1)
    if not bool(torch.allclose(row_norms, torch.ones_like(row_norms), atol=1e-6)):
        raise DataError("prototype rows must be unit-normalized")
    if z.shape[-1] != prototypes.shape[-1]:
        raise DataError(f"projection width {z.shape[-1]} != prototype width {prototypes.shape[-1]}")
    return torch.softmax(z @ prototypes.T, dim=-1)
