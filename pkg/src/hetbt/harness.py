"""Benchmark suite, seeded trials, success-rate and average-steps metrics, reports."""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import yaml

from .coordination import DEFAULT_MAX_TICKS, Terminal, initial_trees, run_mission
from .errors import ConfigError, EmptyOutcomes, MalformedPredicate, ParseError, SchemaError
from .capability_library import default_library
from .planning import OraclePlanner, bfs_plan, relevant_entities
from .world import Predicate, WorldState, holds, load_scenario, parse_predicate, randomize_initial, spawn_variants

PLANNERS = ("oracle", "mcts", "llm", "llm-mcts")
PLANNER_LABELS = {"oracle": "Oracle", "mcts": "MCTS", "llm": "LLM", "llm-mcts": "LLM-MCTS"}
DEFAULT_TRIALS = 5
AUDIT_DEPTH = 30


def data_path(*parts: str) -> Path:
    p = resources.files("hetbt") / "data"
    for part in parts:
        p = p / part
    return Path(str(p))


def default_suite_path() -> Path:
    return data_path("suite.yaml")


# ---------------------------------------------------------------------------
# suite


@dataclass(frozen=True)
class TaskSpec:
    id: str
    scenario: str  # resolved path
    instruction: str
    goal_predicates: tuple[Predicate, ...]
    expected_min_steps: int | None
    infeasible: bool = False

    @property
    def group(self) -> str:
        return self.id.split("-", 1)[0]

    def world(self) -> WorldState:
        return _scenario(self.scenario)


@dataclass(frozen=True)
class Suite:
    tasks: tuple[TaskSpec, ...]
    digest: str
    path: str = ""

    def groups(self) -> list[str]:
        out: list[str] = []
        for t in self.tasks:
            if t.group not in out:
                out.append(t.group)
        return out

    def task(self, task_id: str) -> TaskSpec:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise KeyError(task_id)


@lru_cache(maxsize=None)
def _scenario(path: str) -> WorldState:
    return load_scenario(path)


def load_suite(path: str | Path | None = None) -> Suite:
    p = Path(path) if path is not None else default_suite_path()
    raw = p.read_bytes()
    doc = yaml.safe_load(raw)
    if not isinstance(doc, Mapping) or doc.get("format_version") != 1:
        raise SchemaError("suite format_version must be 1", ("format_version",))
    tasks = []
    seen = set()
    for i, t in enumerate(doc.get("tasks") or []):
        where = ("tasks", i)
        for key in ("id", "scenario", "instruction", "goals"):
            if key not in t:
                raise SchemaError(f"missing {key}", where)
        if t["id"] in seen:
            raise SchemaError(f"duplicate task id {t['id']}", where)
        seen.add(t["id"])
        scen = Path(t["scenario"])
        if not scen.is_absolute():
            scen = (p.parent / scen) if (p.parent / scen).exists() else data_path(str(scen))
        try:
            goals = tuple(parse_predicate(g) for g in t["goals"])
        except MalformedPredicate as exc:
            raise SchemaError(str(exc), where + ("goals",)) from None
        if not goals:
            raise SchemaError("a task needs at least one goal", where + ("goals",))
        world = _scenario(str(scen))
        ids = {r.id for r in world.robots}
        for g in goals:
            if g.agent not in ids:
                raise SchemaError(f"{g} names a robot not in {scen.name}", where + ("goals",))
        tasks.append(
            TaskSpec(
                t["id"], str(scen), t["instruction"], goals,
                t.get("expected_min_steps"), bool(t.get("infeasible", False)),
            )
        )
    return Suite(tuple(tasks), hashlib.sha256(raw).hexdigest(), str(p))


@dataclass(frozen=True)
class AuditRow:
    task: str
    min_steps: int | None  # over every start the randomization can draw
    expected: int | None
    infeasible_starts: int
    ok: bool


def shortest_over_starts(world: WorldState, goals: Sequence[Predicate], max_depth: int = AUDIT_DEPTH) -> tuple[int | None, int]:
    """(fewest steps over all spawn variants, number of variants with no plan).

    Variants that differ only in items the planner ignores share one search.
    """
    robots = [r.id for r in world.robots]
    done: dict[tuple, int | None] = {}
    for w in spawn_variants(world):
        keep = relevant_entities(w, goals)
        key = (w.robots, tuple(o for o in w.objects if o.id in keep))
        if key not in done:
            plan = bfs_plan(w, list(goals), robots, max_depth=max_depth)
            done[key] = None if plan is None else len(plan)
    found = [n for n in done.values() if n is not None]
    return (min(found) if found else None), sum(1 for n in done.values() if n is None)


def audit_suite(suite: Suite, max_depth: int = AUDIT_DEPTH) -> list[AuditRow]:
    """Check every task is solvable from every start and its step bound is exact."""
    rows = []
    for t in suite.tasks:
        n, bad = shortest_over_starts(t.world(), t.goal_predicates, max_depth)
        if t.infeasible:
            ok = n is None
        else:
            ok = bad == 0 and n is not None and (t.expected_min_steps is None or n == t.expected_min_steps)
        rows.append(AuditRow(t.id, n, t.expected_min_steps, bad, ok))
    return rows


# ---------------------------------------------------------------------------
# trials


def derive_seed(base_seed: int, task_id: str, trial: int) -> int:
    h = hashlib.sha256(f"{base_seed}:{task_id}:{trial}".encode()).digest()
    return int.from_bytes(h[:8], "big")


@dataclass(frozen=True)
class TrialOutcome:
    task: str
    trial: int
    seed: int
    success: bool
    ticks: int | None  # None marks a failure
    terminal: str
    actions: int
    decisions: int
    delegated: int
    fallbacks: int

    @property
    def group(self) -> str:
        return self.task.split("-", 1)[0]


@dataclass
class RunConfig:
    planner: str = "oracle"
    trials: int = DEFAULT_TRIALS
    base_seed: int = 0
    max_ticks: int = DEFAULT_MAX_TICKS
    llm_mode: str = "replay"
    transcripts: str | None = None
    mcts_budget: int = 500
    mcts_depth: int = 20
    randomize: bool = True

    def digest(self, suite: Suite) -> str:
        doc = {k: v for k, v in asdict(self).items() if k != "transcripts"}
        doc["suite"] = suite.digest
        doc["library"] = default_library().checksum
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass
class BenchmarkReport:
    planner: str
    trials: int
    base_seed: int
    config_digest: str
    tasks: list[str]
    outcomes: list[TrialOutcome]
    traces: dict[str, str] = field(default_factory=dict, repr=False)

    def for_group(self, group: str) -> list[TrialOutcome]:
        return [o for o in self.outcomes if o.group == group]

    def groups(self) -> list[str]:
        out: list[str] = []
        for t in self.tasks:
            g = t.split("-", 1)[0]
            if g not in out:
                out.append(g)
        return out

    def to_dict(self) -> dict:
        return {
            "planner": self.planner,
            "trials": self.trials,
            "base_seed": self.base_seed,
            "config_digest": self.config_digest,
            "tasks": list(self.tasks),
            "seeds": {f"{o.task}#{o.trial}": o.seed for o in self.outcomes},
            "outcomes": [asdict(o) for o in self.outcomes],
            "metrics": {g: metrics_dict(compute_metrics(self.for_group(g))) for g in self.groups()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "BenchmarkReport":
        outs = [TrialOutcome(**o) for o in doc["outcomes"]]
        return cls(doc["planner"], doc["trials"], doc["base_seed"], doc["config_digest"], list(doc["tasks"]), outs)


def make_planner(cfg: RunConfig, seed: int):
    from .llm_bridge import LLMMCTSPlanner, LLMPlanner
    from .mcts import MCTSPlanner

    if cfg.planner == "oracle":
        return OraclePlanner()
    if cfg.planner == "mcts":
        return MCTSPlanner(seed=seed, budget=cfg.mcts_budget, depth=cfg.mcts_depth)
    client = _client(cfg)
    if cfg.planner == "llm":
        return LLMPlanner(client)
    if cfg.planner == "llm-mcts":
        return LLMMCTSPlanner(client, seed=seed, budget=cfg.mcts_budget, depth=cfg.mcts_depth)
    raise ConfigError(f"unknown planner {cfg.planner!r}; choose from {', '.join(PLANNERS)}")


def _client(cfg: RunConfig):
    from .llm_bridge import ModelClient, TranscriptStore, default_transcript_dir

    root = Path(cfg.transcripts) if cfg.transcripts else default_transcript_dir()
    return ModelClient(cfg.llm_mode, TranscriptStore(root))


def run_trial(task: TaskSpec, trial: int, cfg: RunConfig) -> tuple[TrialOutcome, str]:
    """One seeded mission; returns the outcome and its JSONL trace."""
    seed = derive_seed(cfg.base_seed, task.id, trial)
    world = task.world()
    if cfg.randomize:
        world = randomize_initial(world, seed)
    planner = make_planner(cfg, seed)
    goals = list(task.goal_predicates)
    goal_fallback = 0
    if cfg.planner in ("llm", "llm-mcts"):
        from .llm_bridge import ask_goals

        try:
            goals = ask_goals(planner_client(planner), task.instruction, world, task.goal_predicates)
        except ParseError:
            goal_fallback = 1
    trace = run_mission(world, initial_trees(world, goals), planner, cfg.max_ticks)
    final = trace.final_world
    success = trace.terminal is Terminal.ALL_GOALS_MET and all(holds(final, g) for g in task.goal_predicates)
    fallbacks = goal_fallback + sum(1 for d in trace.decisions if d.fallback)
    out = TrialOutcome(
        task.id, trial, seed, success, trace.ticks if success else None,
        trace.terminal.value, trace.actions, len(trace.decisions), trace.delegated, fallbacks,
    )
    return out, trace.jsonl()


def planner_client(planner):
    llm = getattr(planner, "llm", planner)
    return llm.client


def _job(args):
    task, trial, cfg = args
    return run_trial(task, trial, cfg)


def run_benchmark(
    suite: Suite,
    planner: str = "oracle",
    trials: int = DEFAULT_TRIALS,
    base_seed: int = 0,
    workers: int = 1,
    config: RunConfig | None = None,
    **overrides,
) -> BenchmarkReport:
    """Run every task ``trials`` times; results are ordered by (task, trial)."""
    cfg = config or RunConfig(planner=planner, trials=trials, base_seed=base_seed, **overrides)
    if cfg.planner not in PLANNERS:
        raise ConfigError(f"unknown planner {cfg.planner!r}; choose from {', '.join(PLANNERS)}")
    if cfg.trials < 1:
        raise ConfigError("trials must be >= 1")
    jobs = [(t, i, cfg) for t in suite.tasks for i in range(cfg.trials)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job, jobs, chunksize=1))
    else:
        results = [_job(j) for j in jobs]
    outcomes = [r[0] for r in results]
    traces = {f"{o.task}#{o.trial}": tr for o, tr in results}
    return BenchmarkReport(cfg.planner, cfg.trials, cfg.base_seed, cfg.digest(suite), [t.id for t in suite.tasks], outcomes, traces)


def default_workers() -> int:
    return max(1, min(8, (os.cpu_count() or 1)))


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Metrics:
    n: int
    n_success: int
    success_rate: Fraction
    average_steps: Fraction | None  # over successful tasks; None when there are none

    @property
    def sr_percent(self) -> float:
        return float(self.success_rate * 100)


def _as_pair(o) -> tuple[bool, int | None]:
    if isinstance(o, TrialOutcome):
        return o.success, o.ticks
    if o is None or o == "x":
        return False, None
    if isinstance(o, bool):
        raise TypeError("pass tick counts, None or 'x', not booleans")
    return True, int(o)


def compute_metrics(outcomes: Iterable) -> Metrics:
    """Success rate over all outcomes; average steps over the successful ones.

    Each outcome is a tick count (success), ``None`` or ``"x"`` (failure), or
    a TrialOutcome.
    """
    pairs = [_as_pair(o) for o in outcomes]
    if not pairs:
        raise EmptyOutcomes("no outcomes to score")
    ticks = [k for ok, k in pairs if ok]
    sr = Fraction(len(ticks), len(pairs))
    avg = Fraction(sum(ticks), len(ticks)) if ticks else None
    return Metrics(len(pairs), len(ticks), sr, avg)


def metrics_dict(m: Metrics) -> dict:
    return {
        "n": m.n,
        "n_success": m.n_success,
        "sr": f"{m.success_rate.numerator}/{m.success_rate.denominator}",
        "sr_percent": round(m.sr_percent, 2),
        "average_steps": None if m.average_steps is None else round(float(m.average_steps), 2),
    }


# ---------------------------------------------------------------------------
# reports


def _cell(outs: Sequence[TrialOutcome]) -> dict:
    ticks = [o.ticks for o in outs if o.success]
    mean = None if not ticks else round(sum(ticks) / len(ticks), 2)
    return {"mean_ticks": mean, "successes": len(ticks), "trials": len(outs)}


def _cell_text(c: Mapping) -> str:
    if c["successes"] == 0:
        return "x"
    m = c["mean_ticks"]
    s = str(int(m)) if float(m).is_integer() else f"{m:.1f}"
    if c["successes"] < c["trials"]:
        s += f"({c['successes']}/{c['trials']})"
    return s


def grid(reports: Sequence[BenchmarkReport]) -> dict:
    """Tick-count grid: per group, one row per planner, one column per task."""
    out: dict[str, Any] = {}
    groups: list[str] = []
    for r in reports:
        for g in r.groups():
            if g not in groups:
                groups.append(g)
    for g in groups:
        tasks: list[str] = []
        for r in reports:
            tasks += [t for t in r.tasks if t.startswith(g + "-") and t not in tasks]
        rows = {}
        for r in reports:
            rows[r.planner] = {t: _cell([o for o in r.outcomes if o.task == t]) for t in tasks}
        out[g] = {"tasks": tasks, "rows": rows}
    return out


def summary(reports: Sequence[BenchmarkReport]) -> dict:
    """Per planner and group: success rate and average steps."""
    out = {}
    for r in reports:
        out[r.planner] = {g: metrics_dict(compute_metrics(r.for_group(g))) for g in r.groups()}
    return out


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(x) for x in col) for col in zip(header, *rows)] if header else []
    fmt = lambda row: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
    lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]
    return "\n".join(l.rstrip() for l in lines) + "\n"


def grid_text(g: Mapping) -> str:
    parts = []
    for group, block in g.items():
        header = [group] + [t.split("-", 1)[1] for t in block["tasks"]]
        rows = [[PLANNER_LABELS.get(p, p)] + [_cell_text(c) for c in cells.values()] for p, cells in block["rows"].items()]
        parts.append(_table(header, rows))
    return "\n".join(parts) if parts else _table(["group"], [])


def summary_text(s: Mapping, groups: Sequence[str] | None = None) -> str:
    if groups is None:
        groups = []
        for per in s.values():
            groups += [g for g in per if g not in groups]
    header = ["planner"]
    for g in groups:
        header += [f"{g} SR%", f"{g} AS"]
    rows = []
    for planner, per in s.items():
        row = [PLANNER_LABELS.get(planner, planner)]
        for g in groups:
            m = per.get(g)
            if m is None:
                row += ["-", "-"]
            else:
                row += [f"{m['sr_percent']:g}", "-" if m["average_steps"] is None else f"{m['average_steps']:.2f}"]
        rows.append(row)
    return _table(header, rows)


def emit_report(reports: BenchmarkReport | Sequence[BenchmarkReport], out_dir: str | Path, formats: Sequence[str] = ("json", "txt")) -> list[Path]:
    """Write the grid and the summary in each format, plus the raw outcomes."""
    if isinstance(reports, BenchmarkReport):
        reports = [reports]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g, s = grid(reports), summary(reports)
    written = []

    def put(name: str, text: str):
        p = out / name
        p.write_text(text)
        written.append(p)

    if "json" in formats:
        put("grid.json", json.dumps(g, indent=2, sort_keys=True) + "\n")
        put("summary.json", json.dumps(s, indent=2, sort_keys=True) + "\n")
    if "txt" in formats:
        put("grid.txt", grid_text(g))
        put("summary.txt", summary_text(s))
    for r in reports:
        put(f"outcomes-{r.planner}.json", r.to_json())
    return written


def write_traces(report: BenchmarkReport, out_dir: str | Path) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    for key, text in sorted(report.traces.items()):
        (d / (key.replace("#", "_") + ".jsonl")).write_text(text)
