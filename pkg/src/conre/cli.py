"""Command line interface.

Subcommands: ingest, run, sweep-memory, ablate, analyze, export-heatmap,
resume. Experiments are described by a TOML file; command line flags
override file values. Relative output directories resolve against the
CONRE_OUTPUT_ROOT environment variable when it is set.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import numpy as np
import torch

from .config import PROFILES
from .data import ingest_corpus
from .errors import ConfigError, ConreError, DataError, NumericsError
from .evaluation import analogous_subset_metrics, export_similarity_heatmap, similarity_analysis
from .experiment import (
    ABLATION_SWITCHES,
    EXPERIMENT_FILE,
    ExperimentSpec,
    build_sequence_for_permutation,
    memory_size_sweep,
    resume_experiment,
    run_ablation,
    run_experiment,
)
from .synthetic import SyntheticSpec

OUTPUT_ROOT_ENV = "CONRE_OUTPUT_ROOT"


def _resolve_output(path: str) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not Path(path).is_absolute():
        return str(Path(root) / path)
    return path


def _coerce(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def _apply_overrides(config_values: dict, overrides: list[str]) -> None:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        config_values[key.strip()] = _coerce(raw.strip())


def load_spec(args) -> ExperimentSpec:
    """Build an ExperimentSpec from a TOML file plus command line overrides."""
    file_values: dict = {}
    if args.config:
        with open(args.config, "rb") as handle:
            file_values = tomllib.load(handle)

    profile = args.profile or file_values.get("profile", "fewrel")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    config_values = dict(file_values.get("config", {}))
    _apply_overrides(config_values, args.set or [])
    if args.seed is not None:
        config_values["seed"] = args.seed
    if args.memory_size is not None:
        config_values["memory_size"] = args.memory_size
    try:
        config = PROFILES[profile](**config_values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None

    synthetic = None
    if "synthetic" in file_values:
        synth_values = dict(file_values["synthetic"])
        synth_values["analogous_pairs"] = tuple(tuple(p) for p in synth_values.get("analogous_pairs", ()))
        synthetic = SyntheticSpec(**synth_values)

    output_dir = args.output or file_values.get("output_dir")
    if not output_dir:
        raise ConfigError("no output directory given (flag --output or file key output_dir)")
    return ExperimentSpec(
        config=config,
        output_dir=_resolve_output(str(output_dir)),
        corpus_path=args.corpus or file_values.get("corpus"),
        synthetic=synthetic,
        num_tasks=args.num_tasks or file_values.get("num_tasks", 10),
        permutations=args.permutations or file_values.get("permutations", 5),
        task_split_path=args.task_split or file_values.get("task_split"),
        drop_no_relation=file_values.get("drop_no_relation", True),
    )


def _add_spec_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment TOML file")
    parser.add_argument("--profile", choices=sorted(PROFILES), help="hyperparameter profile")
    parser.add_argument("--corpus", help="JSON-lines corpus path")
    parser.add_argument("--task-split", help="JSON file pinning the relation-to-task division")
    parser.add_argument("--output", help="run directory")
    parser.add_argument("--num-tasks", type=int)
    parser.add_argument("--permutations", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--memory-size", type=int)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any run-config field")


def _cmd_ingest(args) -> int:
    samples, vocab, splits = ingest_corpus(args.corpus, drop_no_relation=not args.keep_no_relation)
    print(f"{len(samples)} samples, {len(vocab)} relations"
          + (f", split labels on {len(splits)} samples" if splits else ", no split labels"))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as handle:
            for sample in samples:
                record = sample.to_dict()
                record["relation"] = vocab.name_of(sample.relation)
                record.pop("provenance")
                if sample.id in splits:
                    record["split"] = splits[sample.id]
                handle.write(json.dumps(record) + "\n")
        print(f"normalized corpus written to {args.out}")
    return 0


def _cmd_run(args) -> int:
    spec = load_spec(args)
    result = run_experiment(spec, workers=args.workers, stop_after_task=args.stop_after)
    print(f"run directory: {result.run_dir}")
    if result.summary:
        for row in result.summary["whole_history"]:
            print(f"after task {row['task']:>2}: {row['display']}")
    return 0


def _cmd_resume(args) -> int:
    result = resume_experiment(args.run_dir, workers=args.workers)
    if result.summary:
        print(f"run complete: {result.run_dir}")
        for row in result.summary["whole_history"]:
            print(f"after task {row['task']:>2}: {row['display']}")
    else:
        print(f"run still incomplete: {result.run_dir}")
    return 0


def _cmd_sweep_memory(args) -> int:
    spec = load_spec(args)
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    report = memory_size_sweep(spec, sizes, workers=args.workers)
    for row in report["sizes"]:
        print(f"memory {row['memory_size']:>3}: {100 * row['mean']:.1f} ± {100 * row['std']:.1f}")
    for diff in report["differences"]:
        print(f"memory {diff['from']} -> {diff['to']}: {100 * diff['difference']:+.1f} points")
    return 0


def _cmd_ablate(args) -> int:
    spec = load_spec(args)
    switches = tuple(s.strip().upper() for s in args.switches.split(",")) if args.switches else ABLATION_SWITCHES
    report = run_ablation(spec, switches, workers=args.workers)
    for row in report["rows"]:
        print(f"{row['variant']:<10} {row['display']}")
    return 0


def _load_perm_state(run_dir: Path, perm: int):
    spec = ExperimentSpec.from_dict(json.loads((run_dir / EXPERIMENT_FILE).read_text()))
    spec.output_dir = str(run_dir)
    perm_dir = run_dir / f"perm_{perm:03d}"
    snapshots = sorted((perm_dir / "snapshots").glob("task_*.pt"))
    if not snapshots:
        raise DataError(f"no snapshots under {perm_dir}")
    state = torch.load(snapshots[-1], map_location="cpu", weights_only=False)
    record = json.loads((perm_dir / "run_record.json").read_text())
    return spec, perm_dir, state, record


def _cmd_analyze(args) -> int:
    run_dir = Path(args.run_dir)
    spec, perm_dir, state, record = _load_perm_state(run_dir, args.perm)
    sequence, names = build_sequence_for_permutation(spec, args.perm)
    history = [{int(r): np.asarray(v) for r, v in entry.items()} for entry in state["prototype_history"]]
    accuracy_history = [
        {int(r): c / t for r, (c, t) in task_entry["per_relation"].items()}
        for task_entry in record["tasks"]
    ]
    intro = {r: sequence.intro_task(r) for r in sequence.all_relations}
    analysis = similarity_analysis(history, accuracy_history, intro, names)
    subsets = analogous_subset_metrics(analysis, threshold=args.threshold)
    (perm_dir / "forgetting_report.json").write_text(json.dumps(analysis.to_dict(), indent=2, sort_keys=True))
    (perm_dir / "subset_metrics.json").write_text(json.dumps(subsets, indent=2, sort_keys=True))
    print(f"{'relation':<24} {'intro':>5} {'first':>7} {'final':>7} {'drop':>7} {'max sim':>8}  bin")
    for entry in analysis.entries:
        print(f"{entry.name:<24} {entry.intro_task:>5} {entry.first_accuracy:>7.3f} "
              f"{entry.final_accuracy:>7.3f} {entry.drop:>7.3f} {entry.max_similarity:>8.3f}  {entry.bin_label}")
    print("\nsudden-drop similarity change (adjacent tasks):")
    for row in analysis.sudden_drop_table:
        before = "-" if row["mean_before"] is None else f"{row['mean_before']:.3f}"
        after = "-" if row["mean_after"] is None else f"{row['mean_after']:.3f}"
        print(f"  {row['bin']:<14} n={row['count']:<4} {before} -> {after}")
    for label in ("analogous", "dissimilar"):
        block = subsets[label]
        if block["count"]:
            print(f"{label}: n={block['count']} accuracy={block['accuracy']:.3f} drop={block['drop']:.3f}")
        else:
            print(f"{label}: none")
    return 0


def _cmd_export_heatmap(args) -> int:
    run_dir = Path(args.run_dir)
    _, perm_dir, state, _ = _load_perm_state(run_dir, args.perm)
    spec = ExperimentSpec.from_dict(json.loads((run_dir / EXPERIMENT_FILE).read_text()))
    spec.output_dir = str(run_dir)
    _, names = build_sequence_for_permutation(spec, args.perm)
    prototypes = {int(r): np.asarray(v) for r, v in state["prototype_history"][-1].items()}
    subset = [int(r) for r in args.relations.split(",")] if args.relations else None
    out = args.out or (perm_dir / f"heatmap.{args.fmt}")
    export_similarity_heatmap(prototypes, names, subset=subset, path=out, fmt=args.fmt)
    print(f"heatmap written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conre", description="continual relation extraction experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a corpus and report statistics")
    p.add_argument("corpus")
    p.add_argument("--keep-no-relation", action="store_true")
    p.add_argument("--out", help="write a normalized copy")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("run", help="run a full experiment")
    _add_spec_arguments(p)
    p.add_argument("--stop-after", type=int, help="stop every permutation after this task (for later resume)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("resume", help="continue an interrupted run")
    p.add_argument("run_dir")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_resume)

    p = sub.add_parser("sweep-memory", help="compare memory sizes")
    _add_spec_arguments(p)
    p.add_argument("--sizes", required=True, help="comma-separated memory sizes")
    p.set_defaults(func=_cmd_sweep_memory)

    p = sub.add_parser("ablate", help="run the ablation grid")
    _add_spec_arguments(p)
    p.add_argument("--switches", help=f"comma-separated subset of {','.join(ABLATION_SWITCHES)}")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("analyze", help="similarity and forgetting analytics for a finished run")
    p.add_argument("run_dir")
    p.add_argument("--perm", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.85)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("export-heatmap", help="prototype cosine-similarity matrix")
    p.add_argument("run_dir")
    p.add_argument("--perm", type=int, default=0)
    p.add_argument("--relations", help="comma-separated relation ids (default: all)")
    p.add_argument("--fmt", choices=("csv", "json"), default="csv")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_export_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ConreError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
