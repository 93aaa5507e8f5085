"""Entity-marker encoding over pluggable token backbones.

A sample is encoded by inserting [E11]/[E12] and [E21]/[E22] around the head
and tail spans, running the marked token sequence through a backbone that
yields per-position hidden vectors, then fusing the hidden states at the two
start markers through a linear layer + LayerNorm into a single vector.

Backbone contract: ``hidden_size`` attribute, ``lookup(token) -> int`` and
``forward(token_ids, mask) -> [batch, length, hidden_size]``, differentiable
w.r.t. its parameters. Both provided backbones (hash-embedding toy network
and a small self-attention encoder) satisfy it; external transformer weights
can be loaded into the latter from a checkpoint file.
"""

from __future__ import annotations

import copy
import logging
import math
import zlib

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Sample
from .errors import ConfigError, DataError
from .seeding import torch_generator

logger = logging.getLogger(__name__)

HEAD_START = "[E11]"
HEAD_END = "[E12]"
TAIL_START = "[E21]"
TAIL_END = "[E22]"
SEPARATOR = "[SEP]"
PAD = "[PAD]"

SPECIAL_TOKENS = (PAD, HEAD_START, HEAD_END, TAIL_START, TAIL_END, SEPARATOR)

ENCODER_FORMAT_VERSION = 1


class EncodingError(DataError):
    """A sample cannot be encoded (marker would fall outside the length limit)."""


def mark_entities(sample: Sample) -> list[str]:
    """Insert the four entity markers around the sample's spans.

    Only the first sentence of a concatenated sample carries spans, so every
    marked sequence contains exactly four marker tokens.
    """
    markers = {HEAD_START, HEAD_END, TAIL_START, TAIL_END}
    collisions = markers.intersection(sample.tokens)
    if collisions:
        raise DataError(f"sample {sample.id!r}: tokens collide with marker tokens {sorted(collisions)}")
    (h0, h1), (t0, t1) = sample.head_span, sample.tail_span
    if h0 <= t0:
        (a0, a1, a_start, a_end) = (h0, h1, HEAD_START, HEAD_END)
        (b0, b1, b_start, b_end) = (t0, t1, TAIL_START, TAIL_END)
    else:
        (a0, a1, a_start, a_end) = (t0, t1, TAIL_START, TAIL_END)
        (b0, b1, b_start, b_end) = (h0, h1, HEAD_START, HEAD_END)
    tokens = list(sample.tokens)
    return (
        tokens[:a0] + [a_start] + tokens[a0:a1] + [a_end]
        + tokens[a1:b0] + [b_start] + tokens[b0:b1] + [b_end]
        + tokens[b1:]
    )


def _hash_token(token: str, buckets: int, reserved: int) -> int:
    return reserved + zlib.crc32(token.encode("utf-8")) % (buckets - reserved)


def _init_parameters(module: nn.Module, generator: torch.Generator, std: float = 0.1) -> None:
    for param in module.parameters():
        with torch.no_grad():
            param.copy_(torch.randn(param.shape, generator=generator, dtype=param.dtype) * std)


class ToyBackbone(nn.Module):
    """Hashed embedding table + two-layer feed-forward with a position-weighted context.

    Per-position embeddings are gated by a positional vector before being
    mean-pooled into a context, so shuffling tokens changes the context: the
    backbone is deliberately not a bag of words.
    """

    kind = "toy"

    def __init__(self, hidden_size=64, ff_size=64, vocab_buckets=4096, max_len=256,
                 dtype=torch.float64, seed=0):
        super().__init__()
        self.hidden_size = hidden_size
        self.vocab_buckets = vocab_buckets
        self.max_len = max_len
        self.tok_emb = nn.Parameter(torch.empty(vocab_buckets, hidden_size, dtype=dtype))
        self.pos_gate = nn.Parameter(torch.empty(max_len, hidden_size, dtype=dtype))
        self.ff1 = nn.Linear(hidden_size, ff_size, dtype=dtype)
        self.ff2 = nn.Linear(ff_size, hidden_size, dtype=dtype)
        _init_parameters(self, torch_generator(seed, "toy-backbone"))
        self._config = dict(hidden_size=hidden_size, ff_size=ff_size, vocab_buckets=vocab_buckets,
                            max_len=max_len, seed=seed)

    def lookup(self, token: str) -> int:
        try:
            return SPECIAL_TOKENS.index(token)
        except ValueError:
            return _hash_token(token, self.vocab_buckets, len(SPECIAL_TOKENS))

    def forward(self, token_ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        length = token_ids.shape[1]
        gated = self.tok_emb[token_ids] * (1.0 + self.pos_gate[:length])
        gated = gated * mask.unsqueeze(-1)
        context = gated.sum(dim=1) / mask.sum(dim=1, keepdim=True)
        hidden = gated + context.unsqueeze(1)
        return self.ff2(torch.tanh(self.ff1(hidden)))

    def config(self) -> dict:
        return dict(self._config)


class _SelfAttentionBlock(nn.Module):
    def __init__(self, hidden_size, num_heads, ff_size, dtype):
        super().__init__()
        if hidden_size % num_heads != 0:
            raise ConfigError(f"hidden_size {hidden_size} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = hidden_size // num_heads
        self.qkv = nn.Linear(hidden_size, 3 * hidden_size, dtype=dtype)
        self.out = nn.Linear(hidden_size, hidden_size, dtype=dtype)
        self.norm1 = nn.LayerNorm(hidden_size, dtype=dtype)
        self.ff1 = nn.Linear(hidden_size, ff_size, dtype=dtype)
        self.ff2 = nn.Linear(ff_size, hidden_size, dtype=dtype)
        self.norm2 = nn.LayerNorm(hidden_size, dtype=dtype)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        batch, length, hidden = x.shape
        qkv = self.qkv(x).reshape(batch, length, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # [batch, heads, length, head_dim]
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask.bool()[:, None, None, :], float("-inf"))
        attended = torch.softmax(scores, dim=-1) @ v
        attended = attended.transpose(1, 2).reshape(batch, length, hidden)
        x = self.norm1(x + self.out(attended))
        return self.norm2(x + self.ff2(F.gelu(self.ff1(x))))


class TransformerBackbone(nn.Module):
    """Small self-attention encoder; an adapter point for external checkpoints."""

    kind = "transformer"

    def __init__(self, hidden_size=64, num_layers=2, num_heads=2, ff_size=128,
                 vocab_buckets=4096, max_len=256, dtype=torch.float64, seed=0):
        super().__init__()
        self.hidden_size = hidden_size
        self.vocab_buckets = vocab_buckets
        self.max_len = max_len
        self.tok_emb = nn.Parameter(torch.empty(vocab_buckets, hidden_size, dtype=dtype))
        self.pos_emb = nn.Parameter(torch.empty(max_len, hidden_size, dtype=dtype))
        self.blocks = nn.ModuleList(
            [_SelfAttentionBlock(hidden_size, num_heads, ff_size, dtype) for _ in range(num_layers)]
        )
        _init_parameters(self, torch_generator(seed, "transformer-backbone"), std=0.05)
        for block in self.blocks:  # restore standard LayerNorm init
            for norm in (block.norm1, block.norm2):
                with torch.no_grad():
                    norm.weight.fill_(1.0)
                    norm.bias.zero_()
        self._config = dict(hidden_size=hidden_size, num_layers=num_layers, num_heads=num_heads,
                            ff_size=ff_size, vocab_buckets=vocab_buckets, max_len=max_len, seed=seed)

    def lookup(self, token: str) -> int:
        try:
            return SPECIAL_TOKENS.index(token)
        except ValueError:
            return _hash_token(token, self.vocab_buckets, len(SPECIAL_TOKENS))

    def forward(self, token_ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        length = token_ids.shape[1]
        x = self.tok_emb[token_ids] + self.pos_emb[:length]
        for block in self.blocks:
            x = block(x, mask)
        return x * mask.unsqueeze(-1)

    def load_checkpoint(self, path) -> None:
        """Load externally trained weights (state-dict file) into this adapter."""
        state = torch.load(path, map_location="cpu", weights_only=True)
        self.load_state_dict(state)

    def config(self) -> dict:
        return dict(self._config)


_BACKBONE_TYPES = {"toy": ToyBackbone, "transformer": TransformerBackbone}


def build_backbone(kind: str, dtype: torch.dtype, **kwargs) -> nn.Module:
    try:
        cls = _BACKBONE_TYPES[kind]
    except KeyError:
        raise ConfigError(f"unknown backbone {kind!r}") from None
    return cls(dtype=dtype, **kwargs)


class EntityMarkerEncoder(nn.Module):
    """Fuse the backbone hidden states at [E11] and [E21] into one representation.

    Output is LayerNorm(W [h_head_start; h_tail_start] + b) with trainable
    LayerNorm gain/shift; its width equals the backbone hidden size.
    """

    def __init__(self, backbone: nn.Module, seed: int = 0):
        super().__init__()
        self.backbone = backbone
        d = backbone.hidden_size
        dtype = next(backbone.parameters()).dtype
        self.fuse = nn.Linear(2 * d, d, dtype=dtype)
        self.norm = nn.LayerNorm(d, dtype=dtype)
        _init_parameters(self.fuse, torch_generator(seed, "encoder-fuse"), std=0.1)
        with torch.no_grad():
            self.norm.weight.fill_(1.0)
            self.norm.bias.zero_()

    @property
    def dim(self) -> int:
        return self.backbone.hidden_size

    @property
    def dtype(self) -> torch.dtype:
        return self.fuse.weight.dtype

    @property
    def max_len(self) -> int:
        return self.backbone.max_len

    def _prepare(self, sample: Sample) -> tuple[list[int], int, int]:
        marked = mark_entities(sample)
        head_idx = marked.index(HEAD_START)
        tail_idx = marked.index(TAIL_START)
        if max(head_idx, tail_idx) >= self.max_len:
            raise EncodingError(
                f"sample {sample.id!r}: an entity marker falls beyond the {self.max_len}-token limit"
            )
        marked = marked[: self.max_len]  # truncate from the right, markers preserved
        return [self.backbone.lookup(tok) for tok in marked], head_idx, tail_idx

    def encode_batch(self, samples, skip_overlong: bool = False):
        """Encode samples into a [batch, dim] tensor.

        With ``skip_overlong`` the samples whose markers would be truncated are
        dropped with a warning and the kept indices are returned alongside the
        representations; otherwise such samples raise :class:`EncodingError`.
        """
        samples = list(samples)
        prepared, kept = [], []
        for i, sample in enumerate(samples):
            try:
                prepared.append(self._prepare(sample))
            except EncodingError:
                if not skip_overlong:
                    raise
                logger.warning("skipping sample %r: marker beyond max_len=%d", sample.id, self.max_len)
                continue
            kept.append(i)
        if not prepared:
            empty = torch.zeros((0, self.dim), dtype=self.dtype)
            return (empty, kept) if skip_overlong else empty

        length = max(len(ids) for ids, _, _ in prepared)
        ids = torch.zeros((len(prepared), length), dtype=torch.long)
        mask = torch.zeros((len(prepared), length), dtype=self.dtype)
        for row, (token_ids, _, _) in enumerate(prepared):
            ids[row, : len(token_ids)] = torch.tensor(token_ids, dtype=torch.long)
            mask[row, : len(token_ids)] = 1.0
        hidden = self.backbone(ids, mask)
        rows = torch.arange(len(prepared))
        head_idx = torch.tensor([h for _, h, _ in prepared])
        tail_idx = torch.tensor([t for _, _, t in prepared])
        fused = self.fuse(torch.cat([hidden[rows, head_idx], hidden[rows, tail_idx]], dim=1))
        out = self.norm(fused)
        return (out, kept) if skip_overlong else out

    def encode(self, sample: Sample) -> torch.Tensor:
        """Encode one sample into a [dim] representation."""
        return self.encode_batch([sample])[0]

    def can_encode(self, sample: Sample) -> bool:
        try:
            self._prepare(sample)
        except EncodingError:
            return False
        return True

    def snapshot(self) -> "EntityMarkerEncoder":
        """Deep, frozen copy; training the original never changes its outputs."""
        frozen = copy.deepcopy(self)
        frozen.eval()
        for param in frozen.parameters():
            param.requires_grad_(False)
        return frozen

    def save(self, path) -> None:
        torch.save(
            {
                "format_version": ENCODER_FORMAT_VERSION,
                "backbone_kind": self.backbone.kind,
                "backbone_config": self.backbone.config(),
                "dtype": str(self.dtype).removeprefix("torch."),
                "state_dict": self.state_dict(),
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "EntityMarkerEncoder":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("format_version") != ENCODER_FORMAT_VERSION:
            raise DataError(f"unsupported encoder format version {blob.get('format_version')!r}")
        dtype = getattr(torch, blob["dtype"])
        backbone = build_backbone(blob["backbone_kind"], dtype=dtype, **blob["backbone_config"])
        encoder = cls(backbone)
        encoder.load_state_dict(blob["state_dict"])
        return encoder
