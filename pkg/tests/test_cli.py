import json
import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import FIXTURES, GOLDEN
from taskvec.cli import main
from taskvec.dataset.core import TaskRecord, TaskSet, save_taskset

SUMMARY_GOLDEN = os.path.join(GOLDEN, "cli_sweep_summary.json")
CATEGORY_COUNTS = {"given": 294, "generate": 193, "rewrite": 178, "create": 159, "classify": 125, "identify": 110,
             "write": 107, "find": 99}


@pytest.fixture
def quick_config(tmp_path):
    path = tmp_path / "quick.yaml"
    path.write_text(
        "episodes_per_task: 2\n"
        "generation:\n  max_tokens: 16\n"
        f"output_dir: {tmp_path / 'runs'}\n"
        "compositional:\n  n_pairs: 3\n  grid_pairs: 2\n"
    )
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def test_sweep_golden_summary(tmp_path, quick_config):
    out = tmp_path / "sweep"
    assert run("sweep", "--config", quick_config, "--out", out) == 0
    for name in ("config.yaml", "resolved_config.yaml", "manifest.json", "rows.jsonl", "summary.json",
                 "summary.csv", "task_ids.json", "overall.png", "categories.png", "distribution.png"):
        assert (out / name).exists(), name
    summary = json.loads((out / "summary.json").read_text())
    assert summary["per_layer"]["3"]["correctness"] == 10.0
    with open(SUMMARY_GOLDEN) as f:
        assert summary == json.load(f)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["backend_id"] == "toy-L6-E3" and manifest["judge_id"] == "oracle-rules-v1"
    assert (out / "config.yaml").read_text() == open(quick_config).read()


def test_rerun_byte_identical(tmp_path, quick_config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("sweep", "--config", quick_config, "--out", a) == 0
    assert run("sweep", "--config", quick_config, "--out", b, "--workers", 2) == 0
    assert (a / "rows.jsonl").read_bytes() == (b / "rows.jsonl").read_bytes()
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()


def test_default_run_dir(tmp_path, quick_config):
    assert run("sweep", "--config", quick_config, "--layer", 3) == 0
    dirs = os.listdir(tmp_path / "runs")
    assert len(dirs) == 1 and dirs[0].startswith("sweep-")


def test_regions(tmp_path, quick_config):
    sweep = tmp_path / "s"
    assert run("sweep", "--config", quick_config, "--out", sweep) == 0
    out = tmp_path / "r"
    assert run("regions", "--config", quick_config, "--out", out, "--rows", sweep / "rows.jsonl") == 0
    data = json.loads((out / "regions.json").read_text())
    assert data["layer"] == 3 and data["counts"]["region_1"] == 4
    assert (out / "regions.png").exists()
    assert (out / "regions.csv").read_text().splitlines()[0].startswith("task_id,category")
    fresh = tmp_path / "r2"
    assert run("regions", "--config", quick_config, "--out", fresh) == 0
    assert (fresh / "regions.csv").read_text() == (out / "regions.csv").read_text()


def test_grid_csv_equals_oracle(tmp_path, quick_config, toy, oracle):
    from test_compositional import brute_force_grid

    from taskvec.compositional import pair_seed, prompt_for_seed

    out = tmp_path / "g"
    assert run("grid", "--config", quick_config, "--out", out) == 0
    for k in range(2):
        prompt = prompt_for_seed(toy, pair_seed(0, k))
        want = brute_force_grid(toy, oracle, prompt, toy.encoding_layer)
        lines = (out / f"grid_{k}.csv").read_text().splitlines()
        got = np.array([[int(c) for c in ln.split(",")[-want.shape[1]:]] for ln in lines[1:]])
        assert np.array_equal(got, want)
        assert (out / f"grid_{k}.png").exists()
        assert (out / f"grid_{k}_prompt.txt").read_text() == prompt.fewshot_text


def test_strategies(tmp_path, quick_config):
    out = tmp_path / "st"
    assert run("strategies", "--config", quick_config, "--out", out) == 0
    rows = (out / "strategies.csv").read_text().splitlines()
    assert rows[0] == "role,strategy,mean_probability,n_pairs,n_failed"
    sub = [r for r in rows[1:] if ",subtask," in r]
    assert len(sub) == 6 and all(r.split(",")[2] == "1.0" for r in sub)
    assert (out / "strategies.png").exists()


def test_validate(tmp_path, capsys):
    good = os.path.join(FIXTURES, "two_tasks.jsonl")
    assert run("dataset", "validate", "--bundle", good) == 0
    short = tmp_path / "short.jsonl"
    save_taskset(TaskSet.from_tasks([TaskRecord.create("Name a color", [(f"{i}", "x") for i in range(29)])]), short)
    capsys.readouterr()
    assert run("dataset", "validate", "--bundle", short) == 1
    lines = [json.loads(ln) for ln in capsys.readouterr().out.splitlines()]
    assert lines[0]["violation"] == "pair-count"
    assert run("dataset", "validate", "--bundle", short, "--grade", "episode") == 0


def test_stats_category_table(tmp_path, capsys):
    tasks = []
    for cat, n in CATEGORY_COUNTS.items():
        tasks += [TaskRecord.create(f"{cat.capitalize()} item {i}", [("a", "b")]) for i in range(n)]
    # 1,657 remaining tasks spread over smaller categories
    rest, k = 1657, 0
    while rest:
        n = min(97, rest)
        tasks += [TaskRecord.create(f"Verb{k} item {i}", [("a", "b")]) for i in range(n)]
        rest -= n
        k += 1
    bundle = tmp_path / "counts.jsonl"
    save_taskset(TaskSet.from_tasks(tasks), bundle)
    capsys.readouterr()
    assert run("dataset", "stats", "--bundle", bundle, "--out", tmp_path / "st") == 0
    table = capsys.readouterr().out.splitlines()
    rows = [ln.split() for ln in table[1:]]
    assert rows[0] == ["given", "294"] and rows[7] == ["find", "99"]
    assert rows[8] == ["other", "1657"] and rows[9] == ["total", str(sum(CATEGORY_COUNTS.values()) + 1657)]
    assert (tmp_path / "st" / "categories.csv").read_text().startswith("category,tasks\ngiven,294\n")


def pipeline_config(tmp_path, root):
    cfg = tmp_path / "pipe.yaml"
    cfg.write_text(f"pipeline:\n  source: {root}/entries.jsonl\n  generator:\n    mode: replay\n"
                   f"    fixtures: {root}/store\n    label: fixture-generator\n")
    return str(cfg)


def test_dataset_filter_and_generate(tmp_path, capsys):
    cfg = pipeline_config(tmp_path, os.path.join(FIXTURES, "pipeline"))
    assert run("dataset", "filter", "--config", cfg, "--out", tmp_path / "f") == 0
    head = json.loads((tmp_path / "f" / "classification.jsonl").read_text().splitlines()[0])
    assert head["verdicts"] == {"GOOD": 1, "INVALID": 1, "LIMITED": 1}
    assert len((tmp_path / "f" / "good_entries.jsonl").read_text().splitlines()) == 1
    assert run("dataset", "generate", "--config", cfg, "--out", tmp_path / "g1") == 0
    assert run("dataset", "generate", "--config", cfg, "--out", tmp_path / "g2") == 0
    a = (tmp_path / "g1" / "taskset.jsonl").read_bytes()
    assert a == (tmp_path / "g2" / "taskset.jsonl").read_bytes()
    assert a.count(b"\n") == 2


def test_generate_skip_classify(tmp_path):
    cfg = pipeline_config(tmp_path, os.path.join(FIXTURES, "pipeline_short"))
    assert run("dataset", "generate", "--config", cfg, "--out", tmp_path / "g", "--skip-classify") == 0
    report = (tmp_path / "g" / "pipeline_report.jsonl").read_text().splitlines()
    assert json.loads(report[1])["status"] == "rejected"


def test_exit_codes(tmp_path, capsys):
    assert run("sweep", "--layer", 99, "--out", tmp_path / "x") == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config"
    bad = tmp_path / "bad.yaml"
    bad.write_text("episodes_per_tusk: 3\n")
    assert run("sweep", "--config", bad) == 2
    assert run("sweep", "--config", tmp_path / "missing.yaml") == 2
    assert run("nonsense") == 2
    assert run("dataset", "validate", "--bundle", tmp_path / "nope.jsonl") == 1
    assert run("dataset", "filter", "--out", tmp_path / "f") == 2


def test_failure_threshold_exit(tmp_path, monkeypatch):
    from taskvec import cli
    from taskvec.judge import JudgingError, ScorePair

    class Flaky:
        kind, judge_id = "llm", "flaky"

        def __init__(self):
            self.n = 0

        def score(self, req):
            self.n += 1
            if self.n % 4 == 0:
                raise JudgingError("bad", ["?"])
            return ScorePair(1, 1)

    monkeypatch.setattr(cli, "make_judge", lambda cfg: Flaky())
    cfg = tmp_path / "c.yaml"
    cfg.write_text("episodes_per_task: 1\ngeneration:\n  max_tokens: 4\n")
    out = tmp_path / "run"
    assert run("sweep", "--config", cfg, "--out", out) == 1
    summary = json.loads((out / "summary.json").read_text())
    assert summary["flagged"] and summary["failed"] > 0


def test_console_script_subprocess(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "taskvec.cli", "dataset", "stats"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[0].split() == ["category", "tasks"]
