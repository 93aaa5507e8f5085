"""Per-task training engine.

For each incoming task: expand the classifier, train on the new task's data,
select typical samples into memory, capture static prototypes for the new
relations, recompute combined prototypes for all seen relations, augment
memory, run replay epochs, and refresh the frozen teacher for the next task.
Parameters update only during new-task training and replay.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import torch

from .config import RunConfig
from .data import Task
from .errors import NumericsError, StateError
from .losses import LossBreakdown, new_task_loss, replay_loss
from .memory import (
    MemoryStore,
    PrototypeStore,
    augment,
    capture_static_prototype,
    combined_prototype,
    select_typical,
)
from .model import ModelState
from .seeding import derive_seed, numpy_rng, torch_generator

logger = logging.getLogger(__name__)


class TrainingLogger:
    """Structured per-step training log: in-memory records, optional JSONL file."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self._handle = open(path, "a", encoding="utf-8") if path else None

    def log(self, **record) -> None:
        self.records.append(record)
        if self._handle is not None:
            self._handle.write(json.dumps(record) + "\n")
            self._handle.flush()

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def make_optimizer(model: ModelState, config: RunConfig, include_projector: bool) -> torch.optim.Optimizer:
    """Adam; a separate backbone learning rate splits the parameters into two groups,
    and a frozen backbone drops out of the optimizer entirely."""
    backbone_params = list(model.encoder.backbone.parameters())
    backbone_ids = {id(p) for p in backbone_params}
    if not config.freeze_backbone and config.backbone_lr is None:
        return torch.optim.Adam(model.trainable_parameters(include_projector), lr=config.lr)
    head_params = [p for p in model.trainable_parameters(include_projector) if id(p) not in backbone_ids]
    if config.freeze_backbone:
        return torch.optim.Adam(head_params, lr=config.lr)
    return torch.optim.Adam(
        [
            {"params": backbone_params, "lr": config.backbone_lr},
            {"params": head_params, "lr": config.lr},
        ]
    )


def _batches(samples: list, batch_size: int, rng):
    order = rng.permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        yield [samples[i] for i in order[start:start + batch_size]]


def _check_finite(value: float, context: str) -> None:
    if value != value or value in (float("inf"), float("-inf")):
        raise NumericsError(f"non-finite loss in {context}: {value}")


def _encodable(model: ModelState, samples, context: str) -> list:
    kept = []
    for sample in samples:
        if not model.encoder.can_encode(sample):
            logger.warning("%s: skipping sample %r (marker beyond max_len=%d)",
                           context, sample.id, model.encoder.max_len)
            continue
        kept.append(sample)
    return kept


def refresh_prototypes(model: ModelState, memory: MemoryStore, prototypes: PrototypeStore,
                       config: RunConfig) -> torch.Tensor:
    """Recompute combined prototypes for every seen relation, in classifier row order."""
    for relation in model.classifier.relations:
        combined_prototype(prototypes, model.encoder, relation, memory,
                           beta=config.beta, mode=config.prototype_mode)
    return prototypes.combined_matrix(model.classifier.relations)


def _train_phase(model: ModelState, samples_for_epoch, config: RunConfig, phase: str,
                 task_index: int, loss_fn, epochs: int, include_projector: bool,
                 log: TrainingLogger | None, refresh=None) -> None:
    optimizer = make_optimizer(model, config, include_projector)
    context = None
    for epoch in range(epochs):
        if refresh is not None:
            context = refresh(epoch)  # prototypes recomputed before the pool is drawn
        samples = samples_for_epoch(epoch)
        rng = numpy_rng(config.seed, "batches", task_index, phase, epoch)
        for step, batch in enumerate(_batches(samples, config.batch_size, rng)):
            optimizer.zero_grad()
            result = loss_fn(batch, context)
            if isinstance(result, LossBreakdown):
                result.check_finite()
                total = result.replay
                fields = result.floats()
            else:
                total = result
                value = float(total.detach())
                _check_finite(value, f"task {task_index} {phase}")
                fields = {"new": value}
            total.backward()
            optimizer.step()
            if log is not None:
                log.log(task=task_index, phase=phase, epoch=epoch, step=step,
                        batch_size=len(batch), **fields)


def run_task(model: ModelState, task: Task, memory: MemoryStore, prototypes: PrototypeStore,
             config: RunConfig, log: TrainingLogger | None = None) -> dict:
    """Run one task through the full framework loop; mutates model, memory, prototypes."""
    expected = model.task_index + 1
    if task.index != expected:
        raise StateError(f"task {task.index} arrived out of order (expected task {expected})")
    k = task.index
    new_relations = sorted(task.relations)
    model.classifier.expand(new_relations, torch_generator(config.seed, "expand", k))

    train_samples = _encodable(model, task.train, f"task {k} train")
    if not train_samples:
        raise StateError(f"task {k}: no encodable training samples")

    model.encoder.train()
    model.projector.train()
    _train_phase(
        model, lambda epoch: train_samples, config, "new_task", k,
        loss_fn=lambda batch, _ctx: new_task_loss(model, batch),
        epochs=config.epochs_new,
        include_projector=config.train_projector_in_new_task,
        log=log,
    )

    if not config.replay:
        model.task_index = k
        return {"task": k, "replay": False}

    for relation in new_relations:
        relation_train = [s for s in train_samples if s.relation == relation]
        selection = select_typical(model.encoder, relation_train, config.memory_size,
                                   derive_seed(config.seed, "select", k, relation))
        memory.store(relation, selection)
        capture_static_prototype(prototypes, model.encoder, relation, relation_train)

    def replay_pool(epoch: int) -> list:
        if config.use_ma and len(memory.relations) >= 2:
            label = ("augment", k, epoch) if config.regenerate_augmentation_each_epoch else ("augment", k)
            pool = augment(memory, derive_seed(config.seed, *label))
        else:
            pool = memory.accumulated()
        # entity replacement can lengthen a sentence past the marker limit
        return _encodable(model, pool, f"task {k} replay")

    pools: dict[int, list] = {}

    def samples_for_epoch(epoch: int) -> list:
        key = epoch if config.regenerate_augmentation_each_epoch else 0
        if key not in pools:
            pools[key] = replay_pool(key)
        return pools[key]

    _train_phase(
        model, samples_for_epoch, config, "replay", k,
        loss_fn=lambda batch, proto_matrix: replay_loss(model, model.teacher, batch, proto_matrix, config),
        epochs=config.epochs_replay,
        include_projector=True,
        log=log,
        refresh=lambda epoch: refresh_prototypes(model, memory, prototypes, config),
    )

    final_prototypes = refresh_prototypes(model, memory, prototypes, config)
    model.refresh_teacher(final_prototypes)
    model.task_index = k
    return {
        "task": k,
        "replay": True,
        "memory_size_total": len(memory),
        "replay_set_size": len(samples_for_epoch(0)),
        "relations": new_relations,
    }
