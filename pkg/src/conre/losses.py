"""Training objectives for both phases.

New-task training minimizes cross-entropy through the linear classifier.
Memory replay combines four terms over the augmented memory: a contrastive
loss (InfoNCE against projected prototypes plus a hardest-negative triplet
term), a linear cross-entropy, and focal knowledge distillation of both
probability families against the previous task's frozen model, where each
sample-relation pair is weighted by prototype similarity and by
(1 - true-class probability)^gamma.

Prototypes enter every loss as constants: gradients flow through the encoder,
classifier and projector only. Focal weights are likewise treated as
coefficients (recomputed from the live model each batch, then detached).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import RunConfig
from .errors import DataError, NumericsError, StateError
from .model import FrozenModel, ModelState


@dataclass
class LossBreakdown:
    """All loss components for one batch, as 0-dim tensors.

    Identities: cls = c_cls + l_cls and replay = cls + lambda1 * c_fkd +
    lambda2 * l_fkd hold exactly as computed.
    """

    new: torch.Tensor
    c_cls: torch.Tensor
    l_cls: torch.Tensor
    cls: torch.Tensor
    c_fkd: torch.Tensor
    l_fkd: torch.Tensor
    replay: torch.Tensor

    def floats(self) -> dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in
                ("new", "c_cls", "l_cls", "cls", "c_fkd", "l_fkd", "replay")}

    def check_finite(self) -> "LossBreakdown":
        for name, value in self.floats().items():
            if value != value or value in (float("inf"), float("-inf")):
                raise NumericsError(f"non-finite loss component {name}: {value}")
        return self


def _zero(model: ModelState) -> torch.Tensor:
    return torch.zeros((), dtype=model.dtype)


def _target_rows(model: ModelState, batch) -> torch.Tensor:
    return model.classifier.rows_for([s.relation for s in batch])


def _linear_ce(model: ModelState, h: torch.Tensor, target_rows: torch.Tensor) -> torch.Tensor:
    log_probs = F.log_softmax(model.classifier.logits(h), dim=-1)
    return -log_probs[torch.arange(len(target_rows)), target_rows].mean()


def new_task_loss(model: ModelState, batch) -> torch.Tensor:
    """Mean cross-entropy of the true labels under the linear classifier."""
    if not batch:
        raise DataError("empty batch")
    target_rows = _target_rows(model, batch)
    h = model.encoder.encode_batch(batch)
    return _linear_ce(model, h, target_rows)


def _project_prototypes(model: ModelState, prototypes_d: torch.Tensor) -> torch.Tensor:
    """Low-dimensional prototypes: the combined prototypes pushed through the
    live projection head. The input prototypes are constants; gradients reach
    the projector parameters only."""
    return model.projector(prototypes_d.detach())


def _check_prototype_rows(model: ModelState, prototypes_d: torch.Tensor) -> None:
    if prototypes_d.shape[0] != model.classifier.num_relations:
        raise DataError(
            f"{prototypes_d.shape[0]} prototype rows for {model.classifier.num_relations} seen relations"
        )


def _contrastive_terms(z_x: torch.Tensor, z_r: torch.Tensor, target_rows: torch.Tensor,
                       config: RunConfig) -> torch.Tensor:
    sims = z_x @ z_r.T
    info_nce = -F.log_softmax(sims / config.tau1, dim=-1)[torch.arange(len(target_rows)), target_rows].mean()
    if z_r.shape[0] < 2:
        return info_nce  # no negative prototype exists; triplet term undefined, skipped
    positive = sims[torch.arange(len(target_rows)), target_rows]
    masked = sims.clone()
    masked[torch.arange(len(target_rows)), target_rows] = float("-inf")
    hardest = masked.max(dim=-1).values
    triplet = torch.clamp(config.omega - positive + hardest, min=0.0).mean()
    return info_nce + config.mu * triplet


def contrastive_replay_loss(model: ModelState, batch, prototypes_d: torch.Tensor,
                            config: RunConfig) -> torch.Tensor:
    """InfoNCE against projected prototypes plus the hardest-negative triplet term."""
    if not batch:
        raise DataError("empty batch")
    _check_prototype_rows(model, prototypes_d)
    target_rows = _target_rows(model, batch)
    z_x = model.projector(model.encoder.encode_batch(batch))
    z_r = _project_prototypes(model, prototypes_d)
    return _contrastive_terms(z_x, z_r, target_rows, config)


def linear_replay_loss(model: ModelState, batch) -> torch.Tensor:
    """Cross-entropy over all seen relations, evaluated on replay batches."""
    return new_task_loss(model, batch)


def _true_class_probs(model: ModelState, h: torch.Tensor, z_x: torch.Tensor,
                      z_r: torch.Tensor, target_rows: torch.Tensor, variant: str) -> torch.Tensor:
    idx = torch.arange(len(target_rows))
    if variant == "linear":
        return torch.softmax(model.classifier.logits(h), dim=-1)[idx, target_rows]
    return torch.softmax(z_x @ z_r.T, dim=-1)[idx, target_rows]


def _check_teacher_rows(model: ModelState, teacher: FrozenModel) -> None:
    if model.classifier.relations[: teacher.num_relations] != teacher.relations:
        raise StateError("teacher relation rows do not prefix the current classifier rows")


def focal_weights(model: ModelState, teacher: FrozenModel, batch, prototypes_d: torch.Tensor,
                  config: RunConfig) -> torch.Tensor:
    """Per sample-relation distillation weights over the previously seen relations.

    Prototype-similarity softmax times (1 - true-class probability)^gamma;
    returned detached, to be used as constants.
    """
    if teacher is None:
        raise StateError("focal weights need a previous-task snapshot")
    _check_teacher_rows(model, teacher)
    _check_prototype_rows(model, prototypes_d)
    target_rows = _target_rows(model, batch)
    with torch.no_grad():
        h = model.encoder.encode_batch(batch)
        z_x = model.projector(h)
        z_r = _project_prototypes(model, prototypes_d)
        p_old = prototypes_d[: teacher.num_relations]
        cos = F.cosine_similarity(h.unsqueeze(1), p_old.unsqueeze(0), dim=-1)
        s = torch.softmax(cos / config.tau2, dim=-1)
        p_true = _true_class_probs(model, h, z_x, z_r, target_rows, config.focal_prob_variant)
        hardness = torch.clamp(1.0 - p_true, min=0.0) ** config.gamma
        return s * hardness.unsqueeze(-1)


def focal_kd_loss(model: ModelState, teacher: FrozenModel, batch, weights: torch.Tensor,
                  variant: str, prototypes_d: torch.Tensor | None = None) -> torch.Tensor:
    """Weighted distillation of the teacher's probabilities over old relations.

    ``variant`` picks the probability family ('contrastive' or 'linear') on
    both sides; gradients flow only through the live model's log-probabilities.
    """
    if variant not in ("contrastive", "linear"):
        raise DataError(f"unknown distillation variant {variant!r}")
    if teacher is None:
        raise StateError("distillation needs a previous-task snapshot")
    _check_teacher_rows(model, teacher)
    n_old = teacher.num_relations
    if weights.shape != (len(batch), n_old):
        raise DataError(f"weights shape {tuple(weights.shape)} != ({len(batch)}, {n_old})")

    h = model.encoder.encode_batch(batch)
    if variant == "linear":
        teacher_probs = teacher.linear_probs(batch)
        student_log = F.log_softmax(model.classifier.logits(h), dim=-1)[:, :n_old]
    else:
        if prototypes_d is None:
            raise DataError("contrastive distillation needs the current prototypes")
        _check_prototype_rows(model, prototypes_d)
        teacher_probs = teacher.contrastive_probs(batch)
        z_x = model.projector(h)
        z_r = _project_prototypes(model, prototypes_d)
        student_log = F.log_softmax(z_x @ z_r.T, dim=-1)[:, :n_old]
    coeff = (weights * teacher_probs).detach()
    return -(coeff * student_log).sum(dim=-1).mean()


def replay_loss(model: ModelState, teacher: FrozenModel | None, batch,
                prototypes_d: torch.Tensor, config: RunConfig,
                fixed_weights: torch.Tensor | None = None) -> LossBreakdown:
    """Full replay objective with its component breakdown.

    The first task has no teacher: both distillation terms are zero. Ablation
    switches zero out exactly their component. ``fixed_weights`` bypasses the
    per-batch focal-weight computation (used by gradient-check harnesses).
    """
    if not batch:
        raise DataError("empty batch")
    _check_prototype_rows(model, prototypes_d)
    target_rows = _target_rows(model, batch)
    zero = _zero(model)

    h = model.encoder.encode_batch(batch)
    z_x = z_r = None
    if config.use_cm:
        z_x = model.projector(h)
        z_r = _project_prototypes(model, prototypes_d)

    c_cls = _contrastive_terms(z_x, z_r, target_rows, config) if config.use_cm else zero
    l_cls = _linear_ce(model, h, target_rows) if config.use_lm else zero
    cls = c_cls + l_cls

    c_fkd = l_fkd = zero
    if config.use_fkd and teacher is not None:
        _check_teacher_rows(model, teacher)
        weights = fixed_weights if fixed_weights is not None else \
            focal_weights(model, teacher, batch, prototypes_d, config)
        n_old = teacher.num_relations
        if config.use_cm:
            teacher_c = teacher.contrastive_probs(batch)
            student_c = F.log_softmax(z_x @ z_r.T, dim=-1)[:, :n_old]
            c_fkd = -((weights * teacher_c).detach() * student_c).sum(dim=-1).mean()
        if config.use_lm:
            teacher_l = teacher.linear_probs(batch)
            student_l = F.log_softmax(model.classifier.logits(h), dim=-1)[:, :n_old]
            l_fkd = -((weights * teacher_l).detach() * student_l).sum(dim=-1).mean()
    replay = cls + config.lambda1 * c_fkd + config.lambda2 * l_fkd
    return LossBreakdown(new=zero, c_cls=c_cls, l_cls=l_cls, cls=cls,
                         c_fkd=c_fkd, l_fkd=l_fkd, replay=replay)
