"""Scikit-learn style estimator wrapping the continual training engine.

``fit`` consumes a :class:`~conre.data.TaskSequence` (or ``partial_fit`` one
task at a time), ``predict``/``predict_proba`` classify samples over all
seen relations, and ``transform`` exposes the encoder representations.
Hyperparameters follow sklearn conventions: stored verbatim on ``__init__``,
introspectable via ``get_params``/``set_params``, with fitted state on
underscore-suffixed attributes.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin

from .config import RunConfig
from .data import Sample, Task, TaskSequence
from .engine import TrainingLogger, refresh_prototypes, run_task
from .errors import DataError, StateError
from .evaluation import combined_probs, effective_alpha, predict as predict_samples
from .memory import MemoryStore, PrototypeStore
from .model import build_model

STATE_FORMAT_VERSION = 1


class ContinualRelationExtractor(BaseEstimator, ClassifierMixin):
    """Continual relation classifier with episodic memory replay.

    One estimator owns one continual run: each fitted task expands the label
    space while memory replay, memory-insensitive prototypes and focal
    distillation preserve the previously learned relations.
    """

    def __init__(self, memory_size=10, alpha=0.5, beta=0.5, tau1=0.1, tau2=0.5,
                 mu=0.5, omega=0.1, gamma=1.25, lambda1=0.5, lambda2=1.1,
                 lr=1e-3, backbone_lr=None, freeze_backbone=False, epochs_new=10, epochs_replay=10,
                 batch_size=16, seed=0, num_threads=1, backbone="toy", d_model=64, d_proj=64,
                 d_hidden=64, max_len=256, vocab_buckets=4096, num_layers=2,
                 num_heads=2, dtype="float64", checkpoint_path=None, replay=True,
                 use_fkd=True, use_lm=True, use_cm=True, use_ma=True, use_dp=True,
                 use_sp=True, train_projector_in_new_task=False,
                 focal_prob_variant="linear", regenerate_augmentation_each_epoch=False,
                 log_path=None):
        self.memory_size = memory_size
        self.alpha = alpha
        self.beta = beta
        self.tau1 = tau1
        self.tau2 = tau2
        self.mu = mu
        self.omega = omega
        self.gamma = gamma
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lr = lr
        self.backbone_lr = backbone_lr
        self.freeze_backbone = freeze_backbone
        self.epochs_new = epochs_new
        self.epochs_replay = epochs_replay
        self.batch_size = batch_size
        self.seed = seed
        self.num_threads = num_threads
        self.backbone = backbone
        self.d_model = d_model
        self.d_proj = d_proj
        self.d_hidden = d_hidden
        self.max_len = max_len
        self.vocab_buckets = vocab_buckets
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.dtype = dtype
        self.checkpoint_path = checkpoint_path
        self.replay = replay
        self.use_fkd = use_fkd
        self.use_lm = use_lm
        self.use_cm = use_cm
        self.use_ma = use_ma
        self.use_dp = use_dp
        self.use_sp = use_sp
        self.train_projector_in_new_task = train_projector_in_new_task
        self.focal_prob_variant = focal_prob_variant
        self.regenerate_augmentation_each_epoch = regenerate_augmentation_each_epoch
        self.log_path = log_path

    # -- configuration ------------------------------------------------------

    def make_config(self) -> RunConfig:
        params = self.get_params()
        params.pop("log_path")
        return RunConfig(**params)

    # -- fitting ------------------------------------------------------------

    def _ensure_initialized(self) -> None:
        if hasattr(self, "model_"):
            return
        self.config_ = self.make_config()
        self.model_ = build_model(self.config_)
        self.memory_ = MemoryStore(self.config_.memory_size)
        self.prototypes_ = PrototypeStore()
        self.log_ = TrainingLogger(self.log_path)
        self.prototype_history_ = []
        self.task_summaries_ = []

    def partial_fit(self, X, y=None):
        """Learn one more task; X is a Task (or a single-task TaskSequence)."""
        if isinstance(X, TaskSequence):
            if len(X) != 1:
                raise DataError("partial_fit takes one task at a time; use fit for a full sequence")
            X = X.tasks[0]
        if not isinstance(X, Task):
            raise DataError(f"partial_fit expects a Task, got {type(X).__name__}")
        self._ensure_initialized()
        summary = run_task(self.model_, X, self.memory_, self.prototypes_, self.config_, log=self.log_)
        self.task_summaries_.append(summary)
        self.classes_ = np.asarray(self.model_.classifier.relations)
        if self.config_.replay:
            self.prototype_history_.append(
                {r: v.numpy().copy() for r, v in self.prototypes_.combined_map().items()}
            )
        return self

    def fit(self, X, y=None):
        """Run the whole task sequence in order, from a fresh state."""
        if not isinstance(X, TaskSequence):
            raise DataError(f"fit expects a TaskSequence, got {type(X).__name__}")
        for attr in ("model_", "memory_", "prototypes_", "config_", "log_",
                     "prototype_history_", "task_summaries_", "classes_"):
            if hasattr(self, attr):
                delattr(self, attr)
        for task in X:
            self.partial_fit(task)
        return self

    # -- inference ----------------------------------------------------------

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_") or self.model_.task_index == 0:
            raise StateError("this estimator has not been fitted to any task yet")

    def _validate_samples(self, X) -> list[Sample]:
        samples = list(X)
        for sample in samples:
            if not isinstance(sample, Sample):
                raise DataError(f"expected Sample instances, got {type(sample).__name__}")
        return samples

    def projected_prototypes(self) -> torch.Tensor | None:
        """Current prototypes in the projection space (None for linear-only models)."""
        if not self.config_.replay or not self.config_.use_cm:
            return None
        with torch.no_grad():
            matrix = self.prototypes_.combined_matrix(self.model_.classifier.relations)
            return self.model_.projector(matrix)

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        samples = self._validate_samples(X)
        alpha = 1.0 if not self.config_.replay else effective_alpha(self.config_)
        return np.asarray(predict_samples(self.model_, self.projected_prototypes(), samples, alpha))

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        samples = self._validate_samples(X)
        alpha = 1.0 if not self.config_.replay else effective_alpha(self.config_)
        return combined_probs(self.model_, self.projected_prototypes(), samples, alpha).numpy()

    def transform(self, X) -> np.ndarray:
        """Encoder representations for the given samples."""
        self._check_fitted()
        samples = self._validate_samples(X)
        with torch.no_grad():
            return self.model_.encoder.encode_batch(samples).numpy()

    def score(self, X, y=None) -> float:
        """Accuracy; labels default to the samples' own relations."""
        samples = self._validate_samples(X)
        if y is None:
            y = [s.relation for s in samples]
        predictions = self.predict(samples)
        y = np.asarray(list(y))
        if len(y) != len(predictions):
            raise DataError(f"{len(y)} labels for {len(predictions)} samples")
        return float((predictions == y).mean()) if len(y) else 0.0

    # -- persistence --------------------------------------------------------

    def save_state(self, path) -> None:
        """Checkpoint the fitted state (exemplars stored by sample id)."""
        self._check_fitted()
        torch.save(
            {
                "format_version": STATE_FORMAT_VERSION,
                "config": self.config_.to_dict(),
                "task_index": self.model_.task_index,
                "backbone_kind": self.model_.encoder.backbone.kind,
                "backbone_config": self.model_.encoder.backbone.config(),
                "encoder_state": self.model_.encoder.state_dict(),
                "projector_state": self.model_.projector.state_dict(),
                "classifier": self.model_.classifier.state_payload(),
                "memory_manifest": self.memory_.manifest(),
                "static_prototypes": self.prototypes_.static_payload(),
                "prototype_history": self.prototype_history_,
                "task_summaries": self.task_summaries_,
            },
            path,
        )

    def load_state(self, path, sequence: TaskSequence) -> "ContinualRelationExtractor":
        """Restore a checkpoint; exemplar samples are looked up in the sequence."""
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("format_version") != STATE_FORMAT_VERSION:
            raise StateError(f"unsupported state format version {blob.get('format_version')!r}")
        config = RunConfig.from_dict(blob["config"])
        if config.to_dict() != self.make_config().to_dict():
            raise StateError("checkpoint config does not match this estimator's parameters")
        self._ensure_initialized()
        self.model_.encoder.load_state_dict(blob["encoder_state"])
        self.model_.projector.load_state_dict(blob["projector_state"])
        from .heads import ExpandingLinearClassifier

        self.model_.classifier = ExpandingLinearClassifier.from_payload(
            blob["classifier"], dtype=self.model_.encoder.dtype
        )
        self.model_.task_index = blob["task_index"]
        index = sequence.train_index()
        for relation, sample_ids in blob["memory_manifest"].items():
            try:
                exemplars = [index[sid] for sid in sample_ids]
            except KeyError as exc:
                raise StateError(f"checkpoint references unknown sample id {exc.args[0]!r}") from None
            self.memory_.store(int(relation), exemplars)
        self.prototypes_.load_static(blob["static_prototypes"])
        self.prototype_history_ = blob["prototype_history"]
        self.task_summaries_ = blob["task_summaries"]
        self.classes_ = np.asarray(self.model_.classifier.relations)
        if self.config_.replay and len(self.memory_.relations) > 0:
            proto_matrix = refresh_prototypes(self.model_, self.memory_, self.prototypes_, self.config_)
            self.model_.refresh_teacher(proto_matrix)
        return self
