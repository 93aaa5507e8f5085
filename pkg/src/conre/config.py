"""Run configuration: hyperparameters, training settings and ablation switches."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError

PROTOTYPE_MODES = ("combined", "static_only", "dynamic_only")
BACKBONES = ("toy", "transformer")


@dataclass
class RunConfig:
    """Everything a single continual-learning run depends on.

    The default hyperparameter values are the FewRel profile; use
    :meth:`tacred_profile` for the TACRED one.
    """

    # memory / prototype hyperparameters
    memory_size: int = 10
    alpha: float = 0.5          # linear weight in combined prediction
    beta: float = 0.5           # dynamic weight in combined prototypes
    # contrastive / distillation hyperparameters
    tau1: float = 0.1           # InfoNCE temperature
    tau2: float = 0.5           # prototype-similarity temperature in focal weights
    mu: float = 0.5             # triplet term weight
    omega: float = 0.1          # triplet margin
    gamma: float = 1.25         # focal exponent
    lambda1: float = 0.5        # contrastive distillation weight
    lambda2: float = 1.1        # linear distillation weight
    # optimizer / schedule
    lr: float = 1e-3
    backbone_lr: float | None = None    # separate backbone lr (transformer runs)
    freeze_backbone: bool = False       # skip backbone finetuning entirely
    epochs_new: int = 10
    epochs_replay: int = 10
    batch_size: int = 16
    seed: int = 0
    num_threads: int = 1                # float reductions reorder with thread count
    # encoder
    backbone: str = "toy"
    d_model: int = 64
    d_proj: int = 64
    d_hidden: int = 64          # toy feed-forward width / transformer ff width
    max_len: int = 256
    vocab_buckets: int = 4096   # hashed token table size
    num_layers: int = 2         # transformer depth
    num_heads: int = 2
    dtype: str = "float64"
    checkpoint_path: str | None = None  # external transformer weights
    # phase / ablation switches
    replay: bool = True                 # False = sequential fine-tuning baseline
    use_fkd: bool = True
    use_lm: bool = True
    use_cm: bool = True
    use_ma: bool = True
    use_dp: bool = True                 # dynamic term in prototypes
    use_sp: bool = True                 # static term in prototypes
    train_projector_in_new_task: bool = False
    focal_prob_variant: str = "linear"  # probability used in the focal factor
    regenerate_augmentation_each_epoch: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.memory_size < 1:
            raise ConfigError(f"memory_size must be >= 1, got {self.memory_size}")
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        for name in ("tau1", "tau2"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if not (self.use_lm or self.use_cm):
            raise ConfigError("disabling both the linear and contrastive methods leaves no trainable objective")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}, expected one of {BACKBONES}")
        if self.focal_prob_variant not in ("linear", "contrastive"):
            raise ConfigError(f"focal_prob_variant must be 'linear' or 'contrastive', got {self.focal_prob_variant!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be 'float32' or 'float64', got {self.dtype!r}")
        self.prototype_mode  # rejects use_dp=False with use_sp=False

    @property
    def prototype_mode(self) -> str:
        if self.use_dp and self.use_sp:
            return "combined"
        if self.use_sp:
            return "static_only"
        if self.use_dp:
            return "dynamic_only"
        raise ConfigError("use_dp and use_sp cannot both be disabled")

    @classmethod
    def fewrel_profile(cls, **overrides) -> "RunConfig":
        return cls(**overrides)

    @classmethod
    def tacred_profile(cls, **overrides) -> "RunConfig":
        values = dict(
            alpha=0.6, beta=0.2, tau1=0.1, mu=0.8, omega=0.15,
            tau2=0.5, gamma=2.0, lambda1=0.5, lambda2=0.7,
        )
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


PROFILES = {
    "fewrel": RunConfig.fewrel_profile,
    "tacred": RunConfig.tacred_profile,
}
