"""Domain types, corpus ingestion and task-sequence construction.

A corpus is a JSON-lines file, one sample per line::

    {"id": "...", "tokens": [...], "h": [start, end], "t": [start, end],
     "relation": "name", "split": "train"|"valid"|"test"}

Spans are token-level, inclusive-exclusive. The optional task-split file is
a JSON object mapping task index (as a string or int) to a list of relation
names, used to replay an externally published task division.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CorpusFormatError, DataError
from .seeding import numpy_rng


class Provenance(str, Enum):
    ORIGINAL = "original"
    ENTITY_REPLACED = "entity_replaced"
    CONCATENATED = "concatenated"
    REPLACED_AND_CONCATENATED = "replaced_and_concatenated"


@dataclass(frozen=True)
class Sample:
    """One tokenized sentence with head/tail entity spans and a relation label."""

    id: str
    tokens: tuple[str, ...]
    head_span: tuple[int, int]
    tail_span: tuple[int, int]
    relation: int
    provenance: Provenance = Provenance.ORIGINAL

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "head_span", tuple(self.head_span))
        object.__setattr__(self, "tail_span", tuple(self.tail_span))
        n = len(self.tokens)
        for name, (start, end) in (("head_span", self.head_span), ("tail_span", self.tail_span)):
            if not (0 <= start < end <= n):
                raise DataError(
                    f"sample {self.id!r}: {name} {(start, end)} is empty or outside the {n}-token sentence"
                )
        hs, he = self.head_span
        ts, te = self.tail_span
        if hs < te and ts < he:
            raise DataError(f"sample {self.id!r}: head span {self.head_span} overlaps tail span {self.tail_span}")

    @property
    def head_tokens(self) -> tuple[str, ...]:
        return self.tokens[self.head_span[0]:self.head_span[1]]

    @property
    def tail_tokens(self) -> tuple[str, ...]:
        return self.tokens[self.tail_span[0]:self.tail_span[1]]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "tokens": list(self.tokens),
            "h": list(self.head_span),
            "t": list(self.tail_span),
            "relation": self.relation,
            "provenance": self.provenance.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Sample":
        return cls(
            id=data["id"],
            tokens=tuple(data["tokens"]),
            head_span=tuple(data["h"]),
            tail_span=tuple(data["t"]),
            relation=int(data["relation"]),
            provenance=Provenance(data.get("provenance", "original")),
        )


class RelationVocab:
    """Dense integer ids for relation names, stable across tasks."""

    def __init__(self, names: Sequence[str] = ()):
        self._names: list[str] = []
        self._ids: dict[str, int] = {}
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        if name in self._ids:
            return self._ids[name]
        rid = len(self._names)
        self._names.append(name)
        self._ids[name] = rid
        return rid

    def id_of(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise DataError(f"unknown relation name {name!r}") from None

    def name_of(self, rid: int) -> str:
        try:
            return self._names[rid]
        except IndexError:
            raise DataError(f"unknown relation id {rid}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    def __len__(self) -> int:
        return len(self._names)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._names)

    def to_dict(self) -> dict:
        return {"names": list(self._names)}

    @classmethod
    def from_dict(cls, data: dict) -> "RelationVocab":
        return cls(data["names"])


@dataclass(frozen=True)
class Task:
    """One step of the continual sequence: a disjoint relation subset with its splits."""

    index: int                      # 1-based position in the sequence
    relations: frozenset[int]
    train: tuple[Sample, ...]
    valid: tuple[Sample, ...]
    test: tuple[Sample, ...]

    def __post_init__(self):
        object.__setattr__(self, "relations", frozenset(self.relations))
        for split_name in ("train", "valid", "test"):
            split = tuple(getattr(self, split_name))
            object.__setattr__(self, split_name, split)
            for sample in split:
                if sample.relation not in self.relations:
                    raise DataError(
                        f"task {self.index}: sample {sample.id!r} has relation {sample.relation} "
                        f"outside the task's relation set"
                    )

    def train_by_relation(self, relation: int) -> list[Sample]:
        return [s for s in self.train if s.relation == relation]


@dataclass(frozen=True)
class TaskSequence:
    tasks: tuple[Task, ...]

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        seen: set[int] = set()
        for task in self.tasks:
            if task.relations & seen:
                raise DataError(
                    f"task {task.index}: relations {sorted(task.relations & seen)} already appear in an earlier task"
                )
            seen |= task.relations

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    @property
    def all_relations(self) -> frozenset[int]:
        out: set[int] = set()
        for task in self.tasks:
            out |= task.relations
        return frozenset(out)

    def seen_relations(self, upto: int) -> frozenset[int]:
        """Union of relation sets of tasks 1..upto."""
        out: set[int] = set()
        for task in self.tasks[:upto]:
            out |= task.relations
        return frozenset(out)

    def intro_task(self, relation: int) -> int:
        for task in self.tasks:
            if relation in task.relations:
                return task.index
        raise DataError(f"relation {relation} does not appear in the sequence")

    def train_index(self) -> dict[str, Sample]:
        """Map sample id -> training sample, across all tasks (used by resume)."""
        out: dict[str, Sample] = {}
        for task in self.tasks:
            for sample in task.train:
                out[sample.id] = sample
        return out


_REQUIRED_FIELDS = ("id", "tokens", "h", "t", "relation")


def ingest_corpus(
    path: str | Path,
    fmt: str = "jsonl",
    drop_no_relation: bool = True,
) -> tuple[list[Sample], RelationVocab, dict[str, str]]:
    """Read and validate a corpus file.

    Returns the validated samples, the relation vocabulary (dense ids in
    first-appearance order) and a sample-id -> split-label map (empty when the
    corpus carries no split labels).
    """
    if fmt != "jsonl":
        raise DataError(f"unsupported corpus format {fmt!r}")
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")

    vocab = RelationVocab()
    samples: list[Sample] = []
    splits: dict[str, str] = {}
    seen_ids: set[str] = set()
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"line {lineno}", "<json>", str(exc)) from None
            record_id = record.get("id", f"line {lineno}")
            for key in _REQUIRED_FIELDS:
                if key not in record:
                    raise CorpusFormatError(record_id, key, "missing field")
            if not isinstance(record["tokens"], list) or not all(isinstance(t, str) for t in record["tokens"]):
                raise CorpusFormatError(record_id, "tokens", "expected a list of strings")
            if not isinstance(record["relation"], str):
                raise CorpusFormatError(record_id, "relation", "expected a relation name string")
            if drop_no_relation and record["relation"] == "no_relation":
                continue
            spans = {}
            for key in ("h", "t"):
                span = record[key]
                if not (isinstance(span, (list, tuple)) and len(span) == 2):
                    raise CorpusFormatError(record_id, key, "expected [start, end]")
                start, end = int(span[0]), int(span[1])
                if start >= end:
                    raise CorpusFormatError(record_id, key, f"empty span ({start}, {end})")
                if not (0 <= start and end <= len(record["tokens"])):
                    raise CorpusFormatError(record_id, key, f"span ({start}, {end}) out of bounds")
                spans[key] = (start, end)
            hs, he = spans["h"]
            ts, te = spans["t"]
            if hs < te and ts < he:
                raise CorpusFormatError(record_id, "h/t", f"head span {spans['h']} overlaps tail span {spans['t']}")
            if record_id in seen_ids:
                raise CorpusFormatError(record_id, "id", "duplicate sample id")
            seen_ids.add(record_id)
            rid = vocab.add(record["relation"])
            samples.append(
                Sample(
                    id=str(record_id),
                    tokens=tuple(record["tokens"]),
                    head_span=spans["h"],
                    tail_span=spans["t"],
                    relation=rid,
                )
            )
            if "split" in record:
                if record["split"] not in ("train", "valid", "test"):
                    raise CorpusFormatError(record_id, "split", f"unknown split {record['split']!r}")
                splits[str(record_id)] = record["split"]
    return samples, vocab, splits


def load_task_split(path: str | Path, vocab: RelationVocab) -> list[list[int]]:
    """Load an externally published task division: task index -> relation names."""
    with Path(path).open("r", encoding="utf-8") as handle:
        raw = json.load(handle)
    if not isinstance(raw, dict):
        raise DataError("task-split file must be a JSON object mapping task index to relation names")
    try:
        ordered = sorted(raw.items(), key=lambda item: int(item[0]))
    except ValueError:
        raise DataError("task-split keys must be integer task indices") from None
    return [[vocab.id_of(name) for name in names] for _, names in ordered]


def build_task_sequence(
    samples: Sequence[Sample],
    num_tasks: int,
    seed: int,
    splits: dict[str, str] | None = None,
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    task_split: Sequence[Sequence[int]] | None = None,
) -> TaskSequence:
    """Partition relations into ``num_tasks`` disjoint groups and build the sequence.

    The partition is a seeded random shuffle chunked into near-equal groups,
    unless ``task_split`` pins an explicit division. When the corpus carries no
    split labels, each relation's samples are split by a seeded shuffle at
    ``split_ratios``.
    """
    by_relation: dict[int, list[Sample]] = {}
    for sample in samples:
        if sample.provenance is not Provenance.ORIGINAL:
            raise DataError(f"sample {sample.id!r}: task sequences are built from original samples only")
        by_relation.setdefault(sample.relation, []).append(sample)
    relations = sorted(by_relation)
    if num_tasks < 1:
        raise DataError(f"num_tasks must be >= 1, got {num_tasks}")
    if len(relations) < num_tasks:
        raise DataError(f"cannot split {len(relations)} relations into {num_tasks} tasks")

    if task_split is not None:
        groups = [list(group) for group in task_split]
        if len(groups) != num_tasks:
            raise DataError(f"task split defines {len(groups)} tasks, expected {num_tasks}")
        listed = [r for group in groups for r in group]
        if sorted(listed) != relations:
            raise DataError("task split must cover every relation exactly once")
    else:
        rng = numpy_rng(seed, "task-partition")
        order = [relations[i] for i in rng.permutation(len(relations))]
        groups = [[int(r) for r in chunk] for chunk in np.array_split(order, num_tasks)]

    tasks = []
    for index, group in enumerate(groups, start=1):
        train: list[Sample] = []
        valid: list[Sample] = []
        test: list[Sample] = []
        for relation in group:
            rel_samples = by_relation[relation]
            if splits:
                for sample in rel_samples:
                    label = splits.get(sample.id, "train")
                    {"train": train, "valid": valid, "test": test}[label].append(sample)
            else:
                rel_rng = numpy_rng(seed, "split", relation)
                order = rel_rng.permutation(len(rel_samples))
                n = len(rel_samples)
                n_train = int(round(split_ratios[0] * n))
                n_valid = int(round(split_ratios[1] * n))
                n_train = min(n_train, n - 1) if n > 1 else n  # keep at least one test sample when possible
                for pos, idx in enumerate(order):
                    if pos < n_train:
                        train.append(rel_samples[idx])
                    elif pos < n_train + n_valid:
                        valid.append(rel_samples[idx])
                    else:
                        test.append(rel_samples[idx])
        tasks.append(Task(index=index, relations=frozenset(group), train=tuple(train), valid=tuple(valid), test=tuple(test)))
    return TaskSequence(tasks=tuple(tasks))
