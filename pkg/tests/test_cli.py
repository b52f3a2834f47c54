import json
import shutil
import subprocess

import pytest
import yaml

from hetbt.cli import main, metrics_from, resolve_options, _parser

from conftest import DATA


def test_run_writes_reports(tmp_path, capsys):
    out = tmp_path / "out"
    rc = main(["run", "--groups", "G1", "--trials", "1", "--out", str(out), "--traces"])
    assert rc == 0
    assert "Oracle" in capsys.readouterr().out
    assert (out / "grid.txt").exists() and (out / "summary.json").exists()
    assert len(list((out / "traces").glob("*.jsonl"))) == 20


def test_flags_override_config_over_defaults(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("trials: 3\nmax-ticks: 50\nplanner: mcts\n")
    opts = resolve_options(_parser().parse_args(["run", "--config", str(cfg), "--trials", "2"]))
    assert (opts["trials"], opts["max_ticks"], opts["planner"], opts["seed"]) == (2, 50, "mcts", 0)


@pytest.mark.parametrize("text", ["nonsense_key: 1\n", "- a\n", "trials: [\n"])
def test_bad_config_exits_2(tmp_path, text, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(text)
    assert main(["run", "--config", str(cfg)]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_unknown_group_exits_2():
    assert main(["run", "--groups", "G9"]) == 2


def test_metrics_from_reference_grid(capsys):
    assert main(["metrics", "--from", str(DATA / "reference_grid.yaml")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["mcts/G1"]["sr_percent"] == 95.0 and doc["mcts/G1"]["average_steps"] == 3.95


def test_metrics_from_report_and_list(tmp_path):
    rep = json.loads((DATA / "golden" / "oracle_g1_report.json").read_text())
    assert metrics_from(rep)["G1"]["sr_percent"] == 100.0
    assert metrics_from([1, "x"])["all"]["sr"] == "1/2"
    assert main(["metrics", "--from", str(tmp_path / "missing.yaml")]) == 2


def test_replay_without_transcripts_exits_2(tmp_path):
    rc = main(["run", "--planner", "llm", "--groups", "G1", "--trials", "1",
               "--transcripts", str(tmp_path), "--out", str(tmp_path / "o")])
    assert rc == 2


@pytest.mark.skipif(shutil.which("hetbt") is None, reason="console script not installed")
def test_console_script():
    r = subprocess.run(["hetbt", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "validate" in r.stdout
