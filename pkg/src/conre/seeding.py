"""Deterministic seed derivation.

All randomness in a run is drawn from generators seeded by
``derive_seed(base, *labels)``. Because every stream is a pure function of
the base seed and its label path, a resumed run re-derives exactly the
streams an uninterrupted run would have used: no RNG state needs to be
checkpointed.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

_MAX_SEED = 2**63 - 1


def derive_seed(base: int, *labels) -> int:
    """Derive a child seed from a base seed and a label path."""
    key = ":".join([str(int(base))] + [str(part) for part in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % _MAX_SEED


def numpy_rng(base: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *labels))


def torch_generator(base: int, *labels) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(base, *labels))
    return gen
