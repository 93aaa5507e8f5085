"""Reproducible experiment driving: multi-seed runs, persistence and resume.

A run directory is self-describing: the experiment spec (with config hash and
package version), one subdirectory per task-sequence permutation holding the
cumulative accuracy matrix, per-relation evaluation record, training log,
per-task model checkpoints, and the final analytics, plus a cross-permutation
summary (mean and std of whole-history accuracy after each task).

Every random stream is derived from (base seed, permutation index, task,
purpose), so interrupting after any task and resuming reproduces the
uninterrupted run bit for bit.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import json
import multiprocessing
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig
from .data import TaskSequence, build_task_sequence, ingest_corpus, load_task_split
from .errors import ConfigError, StateError
from .estimator import ContinualRelationExtractor
from .evaluation import (
    AccuracyMatrix,
    analogous_subset_metrics,
    effective_alpha,
    evaluate_after_task,
    similarity_analysis,
)
from .seeding import derive_seed
from .synthetic import SyntheticSpec, generate_synthetic_sequence

EXPERIMENT_FILE = "experiment.json"
SUMMARY_FILE = "summary.json"
ABLATION_SWITCHES = ("FKD", "LM", "CM", "MA", "DP", "SP")
_SWITCH_FIELDS = {"FKD": "use_fkd", "LM": "use_lm", "CM": "use_cm",
                  "MA": "use_ma", "DP": "use_dp", "SP": "use_sp"}


@dataclass
class ExperimentSpec:
    """A full experiment: data source, run config, permutation count, outputs."""

    config: RunConfig
    output_dir: str
    corpus_path: str | None = None
    synthetic: SyntheticSpec | None = None
    num_tasks: int = 10
    permutations: int = 5
    task_split_path: str | None = None
    drop_no_relation: bool = True

    def __post_init__(self):
        if (self.corpus_path is None) == (self.synthetic is None):
            raise ConfigError("specify exactly one data source: corpus_path or synthetic")
        if self.permutations < 1:
            raise ConfigError(f"permutations must be >= 1, got {self.permutations}")
        if self.synthetic is not None:
            self.num_tasks = self.synthetic.num_tasks

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "output_dir": str(self.output_dir),
            "corpus_path": self.corpus_path,
            "synthetic": dataclasses.asdict(self.synthetic) if self.synthetic else None,
            "num_tasks": self.num_tasks,
            "permutations": self.permutations,
            "task_split_path": self.task_split_path,
            "drop_no_relation": self.drop_no_relation,
            "config_hash": self.config.content_hash(),
            "package_version": __version__,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        synthetic = data.get("synthetic")
        if synthetic is not None:
            synthetic = SyntheticSpec(**{**synthetic, "analogous_pairs": tuple(
                tuple(p) for p in synthetic.get("analogous_pairs", ()))})
        return cls(
            config=RunConfig.from_dict(data["config"]),
            output_dir=data["output_dir"],
            corpus_path=data.get("corpus_path"),
            synthetic=synthetic,
            num_tasks=data.get("num_tasks", 10),
            permutations=data.get("permutations", 5),
            task_split_path=data.get("task_split_path"),
            drop_no_relation=data.get("drop_no_relation", True),
        )

    def permutation_seed(self, index: int) -> int:
        return derive_seed(self.config.seed, "perm", index)


def estimator_from_config(config: RunConfig, log_path=None) -> ContinualRelationExtractor:
    return ContinualRelationExtractor(log_path=log_path, **config.to_dict())


def build_sequence_for_permutation(spec: ExperimentSpec, perm_index: int) -> tuple[TaskSequence, dict]:
    """The task sequence a permutation trains on, plus relation display names."""
    perm_seed = spec.permutation_seed(perm_index)
    if spec.synthetic is not None:
        perm_synth = dataclasses.replace(spec.synthetic, seed=derive_seed(perm_seed, "synthetic"))
        sequence, vocab = generate_synthetic_sequence(perm_synth)
    else:
        samples, vocab, splits = ingest_corpus(spec.corpus_path, drop_no_relation=spec.drop_no_relation)
        task_split = load_task_split(spec.task_split_path, vocab) if spec.task_split_path else None
        sequence = build_task_sequence(samples, spec.num_tasks, seed=perm_seed,
                                       splits=splits or None, task_split=task_split)
    names = {rid: vocab.name_of(rid) for rid in sequence.all_relations}
    return sequence, names


def _json_dump(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def _perm_dir(run_dir: Path, perm_index: int) -> Path:
    return run_dir / f"perm_{perm_index:03d}"


def _write_analytics(perm_dir: Path, record: dict, names: dict, est, sequence: TaskSequence,
                     metadata: dict) -> None:
    if not est.prototype_history_ or len(sequence.all_relations) < 2:
        _json_dump(perm_dir / "forgetting_report.json",
                   {"note": "analytics unavailable", "entries": [], "metadata": metadata})
        return
    accuracy_history = [
        {int(r): c / t for r, (c, t) in task_entry["per_relation"].items()}
        for task_entry in record["tasks"]
    ]
    intro = {r: sequence.intro_task(r) for r in sequence.all_relations}
    analysis = similarity_analysis(est.prototype_history_, accuracy_history, intro, names)
    _json_dump(perm_dir / "forgetting_report.json", {**analysis.to_dict(), "metadata": metadata})
    _json_dump(perm_dir / "subset_metrics.json",
               {**analogous_subset_metrics(analysis), "metadata": metadata})


def _write_memory_snapshot(path: Path, est) -> None:
    """Human-readable memory view: exemplar ids and static prototype per relation."""
    payload = {
        str(relation): {
            "exemplar_ids": ids,
            "static_prototype": est.prototypes_.static(relation).tolist(),
        }
        for relation, ids in est.memory_.manifest().items()
    }
    _json_dump(path, payload)


def run_permutation(spec: ExperimentSpec, perm_index: int, resume: bool = False,
                    stop_after_task: int | None = None) -> AccuracyMatrix:
    """Run (or resume) one permutation; persists all artifacts incrementally.

    The torch thread count is pinned to the configured value for the duration
    of the permutation (and restored afterwards): parallel float reductions
    reorder with the thread count, and resumed runs must reduce in the same
    order as the original to reproduce it bitwise.
    """
    previous_threads = torch.get_num_threads()
    torch.set_num_threads(spec.config.num_threads)
    try:
        return _run_permutation_pinned(spec, perm_index, resume, stop_after_task)
    finally:
        torch.set_num_threads(previous_threads)


def _run_permutation_pinned(spec: ExperimentSpec, perm_index: int, resume: bool,
                            stop_after_task: int | None) -> AccuracyMatrix:
    run_dir = Path(spec.output_dir)
    perm_dir = _perm_dir(run_dir, perm_index)
    snapshots = perm_dir / "snapshots"
    snapshots.mkdir(parents=True, exist_ok=True)

    sequence, names = build_sequence_for_permutation(spec, perm_index)
    num_tasks = len(sequence)
    perm_config = spec.config.replace(seed=spec.permutation_seed(perm_index))
    est = estimator_from_config(perm_config, log_path=perm_dir / "training_log.jsonl")

    matrix_path = perm_dir / "accuracy_matrix.json"
    record_path = perm_dir / "run_record.json"
    completed = 0
    record = {"perm_index": perm_index, "seed": perm_config.seed, "tasks": []}
    if resume:
        existing = sorted(snapshots.glob("task_*.pt"))
        if existing:
            completed = max(int(p.stem.split("_")[1]) for p in existing)
            est.load_state(snapshots / f"task_{completed:02d}.pt", sequence)
            matrix = AccuracyMatrix.load_json(matrix_path)
            record = json.loads(record_path.read_text())
            if matrix.completed_tasks() != completed:
                raise StateError(
                    f"permutation {perm_index}: snapshot at task {completed} but matrix covers "
                    f"{matrix.completed_tasks()} tasks"
                )
        else:
            matrix = AccuracyMatrix(num_tasks)
    else:
        matrix = AccuracyMatrix(num_tasks)

    metadata = {
        "perm_index": perm_index,
        "seed": perm_config.seed,
        "num_threads": perm_config.num_threads,
        "config_hash": spec.config.content_hash(),
        "package_version": __version__,
        "task_relations": [sorted(task.relations) for task in sequence],
    }
    _json_dump(perm_dir / "metadata.json", metadata)

    alpha = effective_alpha(perm_config) if perm_config.replay else 1.0
    for task in sequence.tasks[completed:]:
        est.partial_fit(task)
        proto_low = est.projected_prototypes()
        per_relation = evaluate_after_task(est.model_, proto_low, sequence, task.index, alpha, matrix)
        record["tasks"].append({
            "task": task.index,
            "relations": sorted(task.relations),
            "per_relation": {str(r): list(counts) for r, counts in sorted(per_relation.items())},
            "whole_history": matrix.whole_history(task.index),
        })
        est.save_state(snapshots / f"task_{task.index:02d}.pt")
        if perm_config.replay:
            _write_memory_snapshot(snapshots / f"memory_{task.index:02d}.json", est)
        matrix.save_json(matrix_path)
        matrix.save_csv(perm_dir / "accuracy_matrix.csv")
        _json_dump(record_path, record)
        if stop_after_task is not None and task.index >= stop_after_task:
            break

    if matrix.completed_tasks() == num_tasks:
        _write_analytics(perm_dir, record, names, est, sequence, metadata)
    est.log_.close()
    return matrix


def _run_permutation_worker(spec_dict: dict, perm_index: int, resume: bool,
                            stop_after_task: int | None) -> dict:
    spec = ExperimentSpec.from_dict(spec_dict)
    return run_permutation(spec, perm_index, resume=resume, stop_after_task=stop_after_task).to_dict()


@dataclass
class ExperimentResult:
    run_dir: Path
    matrices: list[AccuracyMatrix]
    summary: dict | None


def run_experiment(spec: ExperimentSpec, resume: bool = False, workers: int = 1,
                   stop_after_task: int | None = None) -> ExperimentResult:
    """Run every permutation and summarize; idempotent under resume."""
    run_dir = Path(spec.output_dir)
    spec_path = run_dir / EXPERIMENT_FILE
    if spec_path.exists():
        stored = json.loads(spec_path.read_text())
        if stored["config_hash"] != spec.config.content_hash():
            raise StateError(
                "run directory holds a different configuration "
                f"({stored['config_hash']} != {spec.config.content_hash()}); refusing to continue"
            )
        if not resume:
            raise StateError(f"{run_dir} already contains an experiment; pass resume to continue it")
    run_dir.mkdir(parents=True, exist_ok=True)
    _json_dump(spec_path, spec.to_dict())

    if workers > 1:
        payload = spec.to_dict()
        # spawn: forking after torch initialization can deadlock its thread pool
        context = multiprocessing.get_context("spawn")
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers, mp_context=context) as pool:
            futures = [
                pool.submit(_run_permutation_worker, payload, i, resume, stop_after_task)
                for i in range(spec.permutations)
            ]
            matrices = [AccuracyMatrix.from_dict(f.result()) for f in futures]
    else:
        matrices = [
            run_permutation(spec, i, resume=resume, stop_after_task=stop_after_task)
            for i in range(spec.permutations)
        ]

    summary = None
    if all(m.completed_tasks() == spec.num_tasks for m in matrices):
        summary = summarize(matrices)
        _json_dump(run_dir / SUMMARY_FILE, summary)
        _write_summary_csv(run_dir / "summary.csv", summary)
    return ExperimentResult(run_dir=run_dir, matrices=matrices, summary=summary)


def summarize(matrices: list[AccuracyMatrix]) -> dict:
    """Mean and std of whole-history accuracy after each task, across permutations."""
    num_tasks = matrices[0].num_tasks
    rows = []
    for k in range(1, num_tasks + 1):
        values = np.array([m.whole_history(k) for m in matrices])
        mean, std = float(values.mean()), float(values.std())
        rows.append({
            "task": k,
            "mean": mean,
            "std": std,
            "display": f"{100 * mean:.1f} ± {100 * std:.1f}",
            "per_permutation": [float(v) for v in values],
        })
    return {"permutations": len(matrices), "whole_history": rows}


def _write_summary_csv(path: Path, summary: dict) -> None:
    import csv

    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["task", "mean_accuracy", "std", "display"])
        for row in summary["whole_history"]:
            writer.writerow([row["task"], f"{row['mean']:.6f}", f"{row['std']:.6f}", row["display"]])


def resume_experiment(run_dir, spec: ExperimentSpec | None = None, workers: int = 1) -> ExperimentResult:
    """Continue an interrupted run from its persisted spec.

    A finished run is a no-op. An explicit spec must hash-match the stored one.
    """
    run_dir = Path(run_dir)
    spec_path = run_dir / EXPERIMENT_FILE
    if not spec_path.exists():
        raise StateError(f"{run_dir} does not contain an experiment (missing {EXPERIMENT_FILE})")
    stored = json.loads(spec_path.read_text())
    loaded = ExperimentSpec.from_dict(stored)
    loaded.output_dir = str(run_dir)
    if spec is not None and spec.config.content_hash() != stored["config_hash"]:
        raise StateError("provided config does not match the run directory; refusing to resume")
    return run_experiment(loaded, resume=True, workers=workers)


def memory_size_sweep(spec: ExperimentSpec, sizes, workers: int = 1) -> dict:
    """Run the experiment per memory size; report final accuracies and adjacent differences."""
    sizes = list(sizes)
    if not sizes:
        raise ConfigError("no memory sizes given")
    for size in sizes:
        if int(size) != size or size < 1:
            raise ConfigError(f"memory sizes must be positive integers, got {size}")
    base_dir = Path(spec.output_dir)
    finals = []
    for size in sizes:
        sub = dataclasses.replace(
            spec,
            config=spec.config.replace(memory_size=int(size)),
            output_dir=str(base_dir / f"memory_{int(size):03d}"),
        )
        result = run_experiment(sub, workers=workers)
        final = result.summary["whole_history"][-1]
        finals.append({"memory_size": int(size), "mean": final["mean"], "std": final["std"]})
    differences = [
        {
            "from": finals[i]["memory_size"],
            "to": finals[i + 1]["memory_size"],
            "difference": finals[i + 1]["mean"] - finals[i]["mean"],
        }
        for i in range(len(finals) - 1)
    ]
    report = {"sizes": finals, "differences": differences}
    base_dir.mkdir(parents=True, exist_ok=True)
    _json_dump(base_dir / "memory_sweep.json", report)
    return report


def run_ablation(spec: ExperimentSpec, switches=ABLATION_SWITCHES, workers: int = 1) -> dict:
    """Baseline plus one run per disabled switch, mirroring the ablation table."""
    unknown = [s for s in switches if s not in _SWITCH_FIELDS]
    if unknown:
        raise ConfigError(f"unknown ablation switches: {unknown}")
    base_dir = Path(spec.output_dir)
    rows = []

    def final_accuracy(sub_spec):
        result = run_experiment(sub_spec, workers=workers)
        return result.summary["whole_history"][-1]

    baseline_spec = dataclasses.replace(spec, output_dir=str(base_dir / "intact"))
    rows.append({"variant": "intact", **final_accuracy(baseline_spec)})
    for switch in switches:
        sub = dataclasses.replace(
            spec,
            config=spec.config.replace(**{_SWITCH_FIELDS[switch]: False}),
            output_dir=str(base_dir / f"wo_{switch.lower()}"),
        )
        rows.append({"variant": f"w/o {switch}", **final_accuracy(sub)})
    report = {"rows": rows}
    _json_dump(base_dir / "ablation.json", report)
    return report
