import csv
import json

import pytest

from conre.cli import main

from test_data import write_corpus


@pytest.fixture
def corpus(tmp_path):
    records = []
    for r in range(4):
        for i in range(12):
            records.append({
                "id": f"r{r}i{i}",
                "tokens": [f"head{r}x{i}", "of", f"sig{r}a", f"sig{r}b", f"tail{r}y{i}"],
                "h": [0, 1],
                "t": [4, 5],
                "relation": f"rel{r}",
            })
    return write_corpus(tmp_path / "corpus.jsonl", records)


@pytest.fixture
def experiment_toml(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(
        """
output_dir = "run"
permutations = 1

[config]
memory_size = 3
d_model = 16
d_proj = 8
d_hidden = 16
vocab_buckets = 64
epochs_new = 2
epochs_replay = 2
batch_size = 8
seed = 11

[synthetic]
num_relations = 4
num_tasks = 2
samples_per_relation = 12
seed = 11
"""
    )
    return path


class TestIngestCommand:
    def test_reports_statistics(self, corpus, capsys):
        assert main(["ingest", str(corpus)]) == 0
        out = capsys.readouterr().out
        assert "48 samples, 4 relations" in out

    def test_normalized_output(self, corpus, tmp_path, capsys):
        out_path = tmp_path / "norm.jsonl"
        assert main(["ingest", str(corpus), "--out", str(out_path)]) == 0
        lines = [json.loads(line) for line in out_path.read_text().splitlines()]
        assert len(lines) == 48
        assert lines[0]["relation"] == "rel0"

    def test_data_error_exit_code(self, tmp_path, capsys):
        bad = write_corpus(tmp_path / "bad.jsonl", [
            {"id": "x", "tokens": ["a", "b"], "h": [0, 0], "t": [1, 2], "relation": "r"},
        ])
        assert main(["ingest", str(bad)]) == 2
        assert "empty span" in capsys.readouterr().err


class TestRunCommand:
    def test_run_resume_analyze_heatmap(self, experiment_toml, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        monkeypatch.setenv("CONRE_OUTPUT_ROOT", str(tmp_path / "results"))
        assert main(["run", "--config", str(experiment_toml), "--stop-after", "1"]) == 0
        run_dir = tmp_path / "results" / "run"
        assert (run_dir / "experiment.json").exists()
        assert not (run_dir / "summary.json").exists()

        assert main(["resume", str(run_dir)]) == 0
        assert (run_dir / "summary.json").exists()
        out = capsys.readouterr().out
        assert "after task  2" in out

        assert main(["analyze", str(run_dir)]) == 0
        out = capsys.readouterr().out
        assert "sudden-drop" in out
        assert (run_dir / "perm_000" / "forgetting_report.json").exists()

        assert main(["export-heatmap", str(run_dir), "--fmt", "csv"]) == 0
        heatmap = run_dir / "perm_000" / "heatmap.csv"
        rows = list(csv.reader(open(heatmap)))
        assert len(rows) == 5  # header + 4 relations

    def test_config_error_exit_code(self, experiment_toml, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        assert main(["run", "--config", str(experiment_toml), "--output", str(tmp_path / "r"),
                     "--set", "use_lm=false", "--set", "use_cm=false"]) == 1
        assert "configuration error" in capsys.readouterr().err

    def test_missing_output_rejected(self, tmp_path, capsys):
        assert main(["run"]) == 1
        assert "no output directory" in capsys.readouterr().err

    def test_corpus_source(self, corpus, tmp_path, capsys):
        out = tmp_path / "corpus-run"
        assert main(["run", "--corpus", str(corpus), "--output", str(out),
                     "--num-tasks", "2", "--permutations", "1", "--seed", "5",
                     "--memory-size", "3",
                     "--set", "d_model=16", "--set", "d_proj=8", "--set", "d_hidden=16",
                     "--set", "vocab_buckets=64", "--set", "epochs_new=2",
                     "--set", "epochs_replay=2", "--set", "batch_size=8"]) == 0
        assert (out / "summary.json").exists()

    def test_profile_selection(self, tmp_path, capsys):
        # tacred profile default beta=0.2 must land in the stored config
        out = tmp_path / "prof"
        assert main(["run", "--profile", "tacred", "--output", str(out), "--permutations", "1",
                     "--set", "d_model=16", "--set", "d_proj=8", "--set", "d_hidden=16",
                     "--set", "vocab_buckets=64", "--set", "epochs_new=1",
                     "--set", "epochs_replay=1", "--set", "batch_size=8",
                     "--set", "memory_size=3",
                     "--config", "/dev/null"]) == 1  # no source given
        err = capsys.readouterr().err
        assert "data source" in err or "configuration error" in err


class TestSweepAndAblateCommands:
    def test_sweep(self, experiment_toml, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        assert main(["sweep-memory", "--config", str(experiment_toml),
                     "--output", str(tmp_path / "sweep"), "--sizes", "2,3"]) == 0
        out = capsys.readouterr().out
        assert "memory   2" in out and "memory 2 -> 3" in out
        assert (tmp_path / "sweep" / "memory_sweep.json").exists()

    def test_ablate_subset(self, experiment_toml, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        assert main(["ablate", "--config", str(experiment_toml),
                     "--output", str(tmp_path / "ablate"), "--switches", "MA"]) == 0
        out = capsys.readouterr().out
        assert "intact" in out and "w/o MA" in out
