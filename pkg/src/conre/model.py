"""Model state: encoder + heads, plus the frozen teacher used for distillation."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import RunConfig
from .encoding import EntityMarkerEncoder, build_backbone
from .errors import StateError
from .heads import ExpandingLinearClassifier, ProjectionHead
from .seeding import derive_seed


class FrozenModel:
    """Immutable snapshot of encoder, classifier, projector and the projected
    prototypes as they stood at the end of a task.

    Serves as the distillation teacher: all its outputs are produced under
    ``torch.no_grad`` and training the live model never changes them.
    """

    def __init__(self, encoder, classifier, projector, proto_low: torch.Tensor, relations):
        self.encoder = encoder
        self.classifier = classifier
        self.projector = projector
        self.proto_low = proto_low.detach().clone()
        self.relations = tuple(relations)

    @classmethod
    def from_parts(cls, encoder: EntityMarkerEncoder, classifier: ExpandingLinearClassifier,
                   projector: ProjectionHead, prototypes_d: torch.Tensor) -> "FrozenModel":
        frozen_encoder = encoder.snapshot()
        frozen_projector = _freeze_module(projector)
        frozen_classifier = ExpandingLinearClassifier.from_payload(
            classifier.state_payload(), dtype=classifier.weight.dtype
        )
        frozen_classifier.weight.requires_grad_(False)
        with torch.no_grad():
            proto_low = frozen_projector(prototypes_d)
        return cls(frozen_encoder, frozen_classifier, frozen_projector, proto_low, classifier.relations)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def linear_probs(self, samples) -> torch.Tensor:
        with torch.no_grad():
            h = self.encoder.encode_batch(samples)
            return self.classifier.probs(h)

    def contrastive_probs(self, samples) -> torch.Tensor:
        with torch.no_grad():
            z = self.projector(self.encoder.encode_batch(samples))
            return torch.softmax(z @ self.proto_low.T, dim=-1)


def _freeze_module(module):
    import copy

    frozen = copy.deepcopy(module)
    frozen.eval()
    for param in frozen.parameters():
        param.requires_grad_(False)
    return frozen


@dataclass
class ModelState:
    """The live continual model for the current task."""

    encoder: EntityMarkerEncoder
    classifier: ExpandingLinearClassifier
    projector: ProjectionHead
    task_index: int = 0
    teacher: FrozenModel | None = None

    def require_teacher(self) -> FrozenModel:
        if self.teacher is None:
            raise StateError("no previous-task snapshot available (first task has no teacher)")
        return self.teacher

    def refresh_teacher(self, prototypes_d: torch.Tensor) -> None:
        self.teacher = FrozenModel.from_parts(self.encoder, self.classifier, self.projector, prototypes_d)

    def trainable_parameters(self, include_projector: bool = True):
        params = list(self.encoder.parameters()) + list(self.classifier.parameters())
        if include_projector:
            params += list(self.projector.parameters())
        return params

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder.dtype


def build_model(config: RunConfig) -> ModelState:
    """Fresh model with all parameters derived from the run seed."""
    dtype = getattr(torch, config.dtype)
    common = dict(
        hidden_size=config.d_model,
        vocab_buckets=config.vocab_buckets,
        max_len=config.max_len,
        seed=derive_seed(config.seed, "backbone"),
    )
    if config.backbone == "toy":
        backbone = build_backbone("toy", dtype=dtype, ff_size=config.d_hidden, **common)
    else:
        backbone = build_backbone(
            "transformer", dtype=dtype, num_layers=config.num_layers,
            num_heads=config.num_heads, ff_size=config.d_hidden, **common,
        )
        if config.checkpoint_path:
            backbone.load_checkpoint(config.checkpoint_path)
    encoder = EntityMarkerEncoder(backbone, seed=derive_seed(config.seed, "encoder"))
    classifier = ExpandingLinearClassifier(config.d_model, dtype=dtype)
    projector = ProjectionHead(config.d_model, config.d_proj, dtype=dtype,
                               seed=derive_seed(config.seed, "projector"))
    return ModelState(encoder=encoder, classifier=classifier, projector=projector)
