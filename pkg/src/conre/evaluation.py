"""Combined prediction, continual-evaluation metrics and similarity analytics.

Prediction mixes the two probability families: (1 - alpha) * contrastive +
alpha * linear, argmaxed over all seen relations. Whole-history accuracy is
always the pooled proportion of correct predictions over the union of seen
test sets, never a mean of per-task accuracies.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import TaskSequence
from .errors import DataError
from .model import ModelState

SIMILARITY_BINS = ("[0.85, 1.00)", "[0.70, 0.85)", "(0.00, 0.70)")
SUDDEN_DROP_BINS = ("(0.0, 20.0)", "[20.0, 40.0)", "[40.0, 100.0)")


def effective_alpha(config: RunConfig) -> float:
    """Ablations collapse the combination onto the surviving method."""
    if not config.use_cm:
        return 1.0
    if not config.use_lm:
        return 0.0
    return config.alpha


def combined_probs(model: ModelState, proto_low: torch.Tensor | None, samples,
                   alpha: float) -> torch.Tensor:
    """Mixture of contrastive and linear probabilities over the seen relations.

    ``proto_low`` is the projected prototype matrix in classifier row order;
    pass None for a linear-only model (e.g. the no-replay baseline).
    """
    if not 0.0 <= alpha <= 1.0:
        raise DataError(f"alpha must lie in [0, 1], got {alpha}")
    with torch.no_grad():
        h = model.encoder.encode_batch(samples)
        p_l = model.classifier.probs(h)
        if proto_low is None:
            return p_l
        if proto_low.shape[0] != model.classifier.num_relations:
            raise DataError(
                f"{proto_low.shape[0]} prototype rows for {model.classifier.num_relations} seen relations"
            )
        z = model.projector(h)
        p_c = torch.softmax(z @ proto_low.T, dim=-1)
        return (1.0 - alpha) * p_c + alpha * p_l


def predict(model: ModelState, proto_low: torch.Tensor | None, samples, alpha: float) -> list[int]:
    """Relation ids of the argmax of the combined distribution."""
    samples = list(samples)
    if not samples:
        return []
    probs = combined_probs(model, proto_low, samples, alpha)
    rows = probs.argmax(dim=-1).tolist()
    relations = model.classifier.relations
    return [relations[row] for row in rows]


class AccuracyMatrix:
    """Correct/total counts per (after_task, test_task), j <= k.

    Derives per-entry accuracy and pooled whole-history accuracy exactly from
    the counts, so the pooled metric can be cross-checked against the per-task
    tallies.
    """

    def __init__(self, num_tasks: int):
        self.num_tasks = num_tasks
        self._counts: dict[tuple[int, int], tuple[int, int]] = {}

    def record(self, after_task: int, test_task: int, correct: int, total: int) -> None:
        if not 1 <= test_task <= after_task <= self.num_tasks:
            raise DataError(f"invalid matrix entry ({after_task}, {test_task})")
        if not 0 <= correct <= total:
            raise DataError(f"invalid counts correct={correct}, total={total}")
        self._counts[(after_task, test_task)] = (correct, total)

    def counts(self, after_task: int, test_task: int) -> tuple[int, int]:
        try:
            return self._counts[(after_task, test_task)]
        except KeyError:
            raise DataError(f"no entry for ({after_task}, {test_task})") from None

    def accuracy(self, after_task: int, test_task: int) -> float:
        correct, total = self.counts(after_task, test_task)
        if total == 0:
            raise DataError(f"empty test split for task {test_task}")
        return correct / total

    def whole_history(self, after_task: int) -> float:
        correct = total = 0
        for j in range(1, after_task + 1):
            c, t = self.counts(after_task, j)
            correct += c
            total += t
        if total == 0:
            raise DataError(f"no test samples recorded after task {after_task}")
        return correct / total

    def whole_history_row(self) -> list[float]:
        return [self.whole_history(k) for k in range(1, self.num_tasks + 1)]

    def completed_tasks(self) -> int:
        return max((k for k, _ in self._counts), default=0)

    def to_dict(self) -> dict:
        return {
            "num_tasks": self.num_tasks,
            "counts": {f"{k},{j}": list(v) for (k, j), v in sorted(self._counts.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AccuracyMatrix":
        matrix = cls(data["num_tasks"])
        for key, (correct, total) in data["counts"].items():
            k, j = (int(part) for part in key.split(","))
            matrix.record(k, j, correct, total)
        return matrix

    def __eq__(self, other) -> bool:
        return isinstance(other, AccuracyMatrix) and self.to_dict() == other.to_dict()

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load_json(cls, path) -> "AccuracyMatrix":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save_csv(self, path) -> None:
        done = self.completed_tasks()
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["after_task"] + [f"T{j}" for j in range(1, self.num_tasks + 1)] + ["whole_history"])
            for k in range(1, done + 1):
                row = [k]
                for j in range(1, self.num_tasks + 1):
                    row.append(f"{self.accuracy(k, j):.6f}" if j <= k else "")
                row.append(f"{self.whole_history(k):.6f}")
                writer.writerow(row)


def count_correct(model: ModelState, proto_low, samples, alpha: float) -> tuple[int, int]:
    predictions = predict(model, proto_low, samples, alpha)
    correct = sum(1 for pred, sample in zip(predictions, samples) if pred == sample.relation)
    return correct, len(samples)


def evaluate_after_task(model: ModelState, proto_low, sequence: TaskSequence, after_task: int,
                        alpha: float, matrix: AccuracyMatrix) -> dict[int, tuple[int, int]]:
    """Fill the matrix row for ``after_task`` and return per-relation counts."""
    per_relation: dict[int, list[int]] = {}
    for task in sequence.tasks[:after_task]:
        if not task.test:
            raise DataError(f"task {task.index} has an empty test split")
        predictions = predict(model, proto_low, task.test, alpha)
        correct = 0
        for pred, sample in zip(predictions, task.test):
            hit = int(pred == sample.relation)
            correct += hit
            bucket = per_relation.setdefault(sample.relation, [0, 0])
            bucket[0] += hit
            bucket[1] += 1
        matrix.record(after_task, task.index, correct, len(task.test))
    return {r: (c, t) for r, (c, t) in per_relation.items()}


def evaluate_sequence(states, sequence: TaskSequence, alpha: float) -> AccuracyMatrix:
    """Evaluate a list of per-task (model, proto_low) snapshots into a full matrix."""
    matrix = AccuracyMatrix(num_tasks=len(sequence))
    for after_task, (model, proto_low) in enumerate(states, start=1):
        evaluate_after_task(model, proto_low, sequence, after_task, alpha, matrix)
    return matrix


# ---------------------------------------------------------------------------
# similarity analytics


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0:
        raise DataError("cosine similarity undefined for a zero prototype")
    return float(np.dot(a, b) / denom)


def similarity_bin(similarity: float) -> str:
    if similarity >= 0.85:
        return SIMILARITY_BINS[0]
    if similarity >= 0.70:
        return SIMILARITY_BINS[1]
    return SIMILARITY_BINS[2]


def sudden_drop_bin(drop_points: float) -> str | None:
    if drop_points <= 0.0:
        return None
    if drop_points < 20.0:
        return SUDDEN_DROP_BINS[0]
    if drop_points < 40.0:
        return SUDDEN_DROP_BINS[1]
    return SUDDEN_DROP_BINS[2]


def _max_similarities(prototypes: dict[int, np.ndarray]) -> dict[int, float]:
    relations = sorted(prototypes)
    out = {}
    for r in relations:
        sims = [_cosine(prototypes[r], prototypes[q]) for q in relations if q != r]
        if sims:
            out[r] = max(sims)
    return out


@dataclass
class RelationForgettingEntry:
    relation: int
    name: str
    intro_task: int
    first_accuracy: float
    final_accuracy: float
    drop: float
    max_similarity: float
    bin_label: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SimilarityAnalysis:
    """Per-relation forgetting report plus the adjacent-task similarity-change table."""

    entries: list[RelationForgettingEntry]
    relations: list[int]
    similarity_matrix: np.ndarray
    sudden_drop_table: list[dict]
    num_tasks: int

    def entry(self, relation: int) -> RelationForgettingEntry:
        for entry in self.entries:
            if entry.relation == relation:
                return entry
        raise DataError(f"no entry for relation {relation}")

    def pair_similarity(self, a: int, b: int) -> float:
        i, j = self.relations.index(a), self.relations.index(b)
        return float(self.similarity_matrix[i, j])

    def to_dict(self) -> dict:
        return {
            "entries": [e.to_dict() for e in self.entries],
            "relations": self.relations,
            "similarity_matrix": self.similarity_matrix.tolist(),
            "sudden_drop_table": self.sudden_drop_table,
            "num_tasks": self.num_tasks,
        }


def similarity_analysis(prototype_history: list[dict[int, np.ndarray]],
                        relation_accuracy_history: list[dict[int, float]],
                        intro_task: dict[int, int],
                        names: dict[int, str] | None = None) -> SimilarityAnalysis:
    """Forgetting report from per-task prototype and per-relation accuracy histories.

    ``prototype_history[t]`` and ``relation_accuracy_history[t]`` describe the
    state after task t+1. Sudden drops are accuracy differences between
    adjacent tasks, in percentage points, binned as (0,20), [20,40), [40,100].
    """
    if len(prototype_history) != len(relation_accuracy_history) or not prototype_history:
        raise DataError("prototype and accuracy histories must align and be non-empty")
    final_prototypes = prototype_history[-1]
    relations = sorted(final_prototypes)
    if len(relations) < 2:
        raise DataError("similarity analysis needs at least 2 relations")

    n = len(relations)
    matrix = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            matrix[i, j] = matrix[j, i] = _cosine(final_prototypes[relations[i]],
                                                  final_prototypes[relations[j]])

    final_acc = relation_accuracy_history[-1]
    entries = []
    for i, r in enumerate(relations):
        first = relation_accuracy_history[intro_task[r] - 1][r]
        final = final_acc[r]
        max_sim = float(np.max(np.delete(matrix[i], i)))
        entries.append(
            RelationForgettingEntry(
                relation=r,
                name=names.get(r, str(r)) if names else str(r),
                intro_task=intro_task[r],
                first_accuracy=first,
                final_accuracy=final,
                drop=first - final,
                max_similarity=max_sim,
                bin_label=similarity_bin(max_sim),
            )
        )

    max_sim_history = [_max_similarities(protos) for protos in prototype_history]
    buckets: dict[str, list[tuple[float, float]]] = {label: [] for label in SUDDEN_DROP_BINS}
    for t in range(len(relation_accuracy_history) - 1):
        before_acc, after_acc = relation_accuracy_history[t], relation_accuracy_history[t + 1]
        for r, acc in before_acc.items():
            if r not in after_acc or r not in max_sim_history[t] or r not in max_sim_history[t + 1]:
                continue
            label = sudden_drop_bin((acc - after_acc[r]) * 100.0)
            if label is not None:
                buckets[label].append((max_sim_history[t][r], max_sim_history[t + 1][r]))
    table = []
    for label in SUDDEN_DROP_BINS:
        pairs = buckets[label]
        table.append({
            "bin": label,
            "count": len(pairs),
            "mean_before": float(np.mean([p[0] for p in pairs])) if pairs else None,
            "mean_after": float(np.mean([p[1] for p in pairs])) if pairs else None,
        })
    return SimilarityAnalysis(
        entries=entries,
        relations=relations,
        similarity_matrix=matrix,
        sudden_drop_table=table,
        num_tasks=len(prototype_history),
    )


def analogous_subset_metrics(analysis: SimilarityAnalysis, threshold: float = 0.85,
                             dissimilar_threshold: float = 0.7) -> dict:
    """Accuracy and drop on the analogous and dissimilar relation subsets.

    Analogous: relations introduced in the first half of the sequence whose
    final prototype similarity to some later-introduced relation exceeds the
    threshold. Dissimilar: relations whose maximum similarity stays below the
    dissimilar threshold.
    """
    former_end = analysis.num_tasks // 2
    analogous: list[RelationForgettingEntry] = []
    for entry in analysis.entries:
        if entry.intro_task > former_end:
            continue
        partners = [
            other for other in analysis.entries
            if other.intro_task > former_end
            and analysis.pair_similarity(entry.relation, other.relation) > threshold
        ]
        if partners:
            analogous.append(entry)
    dissimilar = [e for e in analysis.entries if e.max_similarity < dissimilar_threshold]

    def summarize(entries):
        if not entries:
            return {"count": 0, "relations": [], "accuracy": None, "drop": None, "note": "none"}
        return {
            "count": len(entries),
            "relations": [e.relation for e in entries],
            "accuracy": float(np.mean([e.final_accuracy for e in entries])),
            "drop": float(np.mean([e.drop for e in entries])),
        }

    return {
        "threshold": threshold,
        "dissimilar_threshold": dissimilar_threshold,
        "analogous": summarize(analogous),
        "dissimilar": summarize(dissimilar),
    }


def export_similarity_heatmap(prototypes: dict[int, np.ndarray], names: dict[int, str] | None = None,
                              subset=None, path=None, fmt: str = "csv") -> np.ndarray:
    """Symmetric cosine-similarity matrix over a relation subset, written plot-ready."""
    relations = sorted(prototypes) if subset is None else list(subset)
    for r in relations:
        if r not in prototypes:
            raise DataError(f"no prototype for relation {r}")
    n = len(relations)
    matrix = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            matrix[i, j] = matrix[j, i] = _cosine(prototypes[relations[i]], prototypes[relations[j]])
    labels = [names.get(r, str(r)) if names else str(r) for r in relations]
    if path is not None:
        if fmt == "csv":
            with open(path, "w", newline="") as handle:
                writer = csv.writer(handle)
                writer.writerow(["relation"] + labels)
                for label, row in zip(labels, matrix):
                    writer.writerow([label] + [f"{value:.10f}" for value in row])
        elif fmt == "json":
            Path(path).write_text(json.dumps({"relations": labels, "matrix": matrix.tolist()}, indent=2))
        else:
            raise DataError(f"unknown heatmap format {fmt!r}")
    return matrix
