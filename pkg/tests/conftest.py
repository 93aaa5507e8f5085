import pytest
import torch

from conre.config import RunConfig
from conre.data import Provenance, Sample
from conre.model import build_model

torch.set_num_threads(2)


@pytest.fixture(autouse=True)
def _pin_torch_threads():
    # reductions reorder with the thread count; keep every test at one setting
    torch.set_num_threads(2)
    yield


def make_sample(sid="s0", tokens=("alpha", "beta", "gamma", "delta"), head=(0, 1),
                tail=(2, 3), relation=0, provenance=Provenance.ORIGINAL):
    return Sample(id=sid, tokens=tuple(tokens), head_span=head, tail_span=tail,
                  relation=relation, provenance=provenance)


def tiny_config(**overrides):
    """Small everything: suitable for finite-difference checks and fast loops."""
    values = dict(
        memory_size=3, d_model=8, d_proj=6, d_hidden=8, max_len=32, vocab_buckets=32,
        epochs_new=2, epochs_replay=2, batch_size=4, seed=0, dtype="float64",
    )
    values.update(overrides)
    return RunConfig(**values)


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture
def model(config):
    return build_model(config)


def relation_samples(relation, count, offset=0, token_stub=None):
    """Distinct single-relation samples with relation-specific vocabulary."""
    stub = token_stub or f"r{relation}"
    out = []
    for i in range(count):
        j = offset + i
        out.append(
            make_sample(
                sid=f"{stub}-{j:03d}",
                tokens=(f"{stub}head{j}", "of", f"{stub}sig{j % 3}", f"{stub}word", f"{stub}tail{j}"),
                head=(0, 1),
                tail=(4, 5),
                relation=relation,
            )
        )
    return out
