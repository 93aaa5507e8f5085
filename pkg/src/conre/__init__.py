"""Continual relation extraction with episodic memory replay.

Public API: the sklearn-style :class:`ContinualRelationExtractor`, the data
model (samples, task sequences, ingestion, synthetic corpora), and the
experiment runner used by the ``conre`` command line tool.
"""

__version__ = "0.1.0"

from .config import RunConfig
from .data import (
    Provenance,
    RelationVocab,
    Sample,
    Task,
    TaskSequence,
    build_task_sequence,
    ingest_corpus,
)
from .errors import ConfigError, ConreError, DataError, NumericsError, StateError
from .estimator import ContinualRelationExtractor
from .evaluation import (
    AccuracyMatrix,
    analogous_subset_metrics,
    export_similarity_heatmap,
    similarity_analysis,
)
from .experiment import (
    ExperimentSpec,
    memory_size_sweep,
    resume_experiment,
    run_ablation,
    run_experiment,
)
from .synthetic import SyntheticSpec, generate_synthetic_sequence

__all__ = [
    "AccuracyMatrix",
    "ConfigError",
    "ConreError",
    "ContinualRelationExtractor",
    "DataError",
    "ExperimentSpec",
    "NumericsError",
    "Provenance",
    "RelationVocab",
    "RunConfig",
    "Sample",
    "StateError",
    "SyntheticSpec",
    "Task",
    "TaskSequence",
    "analogous_subset_metrics",
    "build_task_sequence",
    "export_similarity_heatmap",
    "generate_synthetic_sequence",
    "ingest_corpus",
    "memory_size_sweep",
    "resume_experiment",
    "run_ablation",
    "run_experiment",
    "similarity_analysis",
]
