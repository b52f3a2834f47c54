from fractions import Fraction

import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from hetbt.errors import ConfigError, EmptyOutcomes, SchemaError
from hetbt.harness import (
    BenchmarkReport,
    RunConfig,
    Suite,
    TrialOutcome,
    compute_metrics,
    derive_seed,
    emit_report,
    grid,
    grid_text,
    load_suite,
    run_benchmark,
    run_trial,
    shortest_over_starts,
    summary,
    write_traces,
)

from conftest import DATA

REFERENCE = yaml.safe_load((DATA / "reference_grid.yaml").read_text())


def subset(suite, ids):
    return Suite(tuple(t for t in suite.tasks if t.id in ids), suite.digest, suite.path)


def outcome(task, ticks, trial=0):
    return TrialOutcome(task, trial, 0, ticks is not None, ticks, "AllGoalsMet" if ticks else "CannotComplete", 0, 0, 0, 0)


# --- suite ---------------------------------------------------------------------


def test_suite_shape(suite):
    assert len(suite.tasks) == 60
    assert suite.groups() == ["G1", "G2", "G3"]
    assert all(len([t for t in suite.tasks if t.group == g]) == 20 for g in suite.groups())
    assert len({t.id for t in suite.tasks}) == 60
    assert all(t.expected_min_steps is not None and not t.infeasible for t in suite.tasks)


def test_difficulty_rises_by_group(suite):
    means = [sum(t.expected_min_steps for t in suite.tasks if t.group == g) / 20 for g in suite.groups()]
    assert means == sorted(means) and means[0] < means[-1]


@pytest.mark.parametrize("task_id", ["G1-T05", "G2-T09", "G3-T08"])
def test_step_bound_is_minimum_over_starts(suite, task_id):
    t = suite.task(task_id)
    n, bad = shortest_over_starts(t.world(), t.goal_predicates)
    assert n == t.expected_min_steps and bad == 0


@pytest.mark.parametrize(
    "doc",
    [
        {"format_version": 2, "tasks": []},
        {"format_version": 1, "tasks": [{"id": "A", "scenario": "scenarios/handoff.yaml", "instruction": "i"}]},
        {"format_version": 1, "tasks": [{"id": "A", "scenario": "scenarios/handoff.yaml", "instruction": "i", "goals": ["Bad?(x)"]}]},
        {"format_version": 1, "tasks": [{"id": "A", "scenario": "scenarios/handoff.yaml", "instruction": "i", "goals": []}]},
        {"format_version": 1, "tasks": [{"id": "A", "scenario": "scenarios/handoff.yaml", "instruction": "i", "goals": ["DroneOnGround?(drone1)"]}]},
        {"format_version": 1, "tasks": [
            {"id": "A", "scenario": "scenarios/handoff.yaml", "instruction": "i", "goals": ["ArmObjectFreeGrab?(arm1)"]},
            {"id": "A", "scenario": "scenarios/handoff.yaml", "instruction": "i", "goals": ["ArmObjectFreeGrab?(arm1)"]},
        ]},
    ],
)
def test_bad_suites(tmp_path, doc):
    p = tmp_path / "suite.yaml"
    p.write_text(yaml.safe_dump(doc))
    with pytest.raises(SchemaError):
        load_suite(p)


# --- metrics ------------------------------------------------------------------------


def test_metrics_over_published_rows():
    got = {name: compute_metrics(rows["G1"]) for name, rows in REFERENCE.items()}
    assert (got["mcts"].success_rate, got["mcts"].average_steps) == (Fraction(19, 20), Fraction(75, 19))
    assert got["llm-hbt"].success_rate == 1


def test_metrics_edge_cases():
    with pytest.raises(EmptyOutcomes):
        compute_metrics([])
    m = compute_metrics(["x", None])
    assert m.success_rate == 0 and m.average_steps is None
    with pytest.raises(TypeError):
        compute_metrics([True])


@given(st.lists(st.one_of(st.none(), st.integers(1, 50)), min_size=1, max_size=40))
def test_metrics_properties(cells):
    m = compute_metrics(cells)
    wins = [c for c in cells if c is not None]
    assert m.n == len(cells) and m.n_success == len(wins)
    assert 0 <= m.success_rate <= 1
    if wins:
        assert min(wins) <= m.average_steps <= max(wins)
    assert compute_metrics([outcome("G1-T01", c) for c in cells]) == m


# --- trials -------------------------------------------------------------------------


def test_seed_derivation():
    assert derive_seed(0, "G1-T01", 0) == derive_seed(0, "G1-T01", 0)
    assert len({derive_seed(b, t, i) for b in (0, 1) for t in ("G1-T01", "G1-T02") for i in (0, 1)}) == 8


def test_trial_is_reproducible(suite):
    t = suite.task("G2-T09")
    cfg = RunConfig(trials=1)
    assert run_trial(t, 0, cfg) == run_trial(t, 0, cfg)


def test_trial_respects_tick_budget(suite):
    t = suite.task("G3-T19")
    out, _ = run_trial(t, 0, RunConfig(max_ticks=2))
    assert not out.success and out.terminal == "TickBudgetExhausted"


def test_golden_oracle_report(suite):
    r = run_benchmark(Suite(tuple(t for t in suite.tasks if t.group == "G1"), suite.digest), "oracle", trials=2, base_seed=0)
    assert r.to_json() == (DATA / "golden" / "oracle_g1_report.json").read_text()


def test_report_round_trip_and_outputs(tmp_path, suite):
    r = run_benchmark(subset(suite, {"G1-T01", "G3-T04"}), "oracle", trials=2)
    back = BenchmarkReport.from_dict(yaml.safe_load(r.to_json()))
    assert back.outcomes == r.outcomes
    names = sorted(p.name for p in emit_report(r, tmp_path))
    assert names == ["grid.json", "grid.txt", "outcomes-oracle.json", "summary.json", "summary.txt"]
    write_traces(r, tmp_path / "traces")
    assert len(list((tmp_path / "traces").glob("*.jsonl"))) == 4


def test_grid_text_marks_partial_and_failed_cells():
    r = BenchmarkReport("mcts", 2, 0, "d", ["G1-T01", "G1-T02", "G1-T03"], [
        outcome("G1-T01", 3), outcome("G1-T01", 5, 1),
        outcome("G1-T02", 4), outcome("G1-T02", None, 1),
        outcome("G1-T03", None), outcome("G1-T03", None, 1),
    ])
    text = grid_text(grid([r]))
    assert text.splitlines()[-1].split() == ["MCTS", "4", "4(1/2)", "x"]
    m = summary([r])["mcts"]["G1"]
    assert (m["n_success"], m["n"], m["sr"]) == (3, 6, "1/2")


def test_bad_run_configs(suite):
    with pytest.raises(ConfigError):
        run_benchmark(suite, "magic")
    with pytest.raises(ConfigError):
        run_benchmark(suite, "oracle", trials=0)
