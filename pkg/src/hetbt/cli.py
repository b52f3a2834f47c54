"""Command line: ``hetbt run | validate | metrics``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .errors import ConfigError, HetBTError
from .harness import (
    DEFAULT_TRIALS,
    PLANNERS,
    BenchmarkReport,
    RunConfig,
    Suite,
    audit_suite,
    compute_metrics,
    emit_report,
    load_suite,
    metrics_dict,
    run_benchmark,
    summary,
    summary_text,
    write_traces,
)

RUN_DEFAULTS: dict[str, Any] = {
    "suite": None,
    "planner": "oracle",
    "trials": DEFAULT_TRIALS,
    "seed": 0,
    "llm_mode": "replay",
    "transcripts": None,
    "out": "results",
    "workers": 1,
    "max_ticks": 200,
    "groups": None,
    "traces": False,
    "mcts_budget": 500,
    "mcts_depth": 20,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hetbt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the benchmark and write reports")
    run.add_argument("--config", help="YAML or JSON file with defaults for any flag below")
    run.add_argument("--suite", help="suite file (default: bundled suite)")
    run.add_argument("--planner", choices=PLANNERS)
    run.add_argument("--trials", type=int)
    run.add_argument("--seed", type=int, help="base seed")
    run.add_argument("--llm-mode", dest="llm_mode", choices=("live", "record", "replay"))
    run.add_argument("--transcripts", help="transcript directory (default: bundled)")
    run.add_argument("--out", help="output directory")
    run.add_argument("--workers", type=int, help="parallel worker processes")
    run.add_argument("--max-ticks", dest="max_ticks", type=int)
    run.add_argument("--groups", help="comma-separated task groups to run, e.g. G1,G3")
    run.add_argument("--traces", action="store_const", const=True, help="also write one JSONL trace per trial")
    run.add_argument("--mcts-budget", dest="mcts_budget", type=int)
    run.add_argument("--mcts-depth", dest="mcts_depth", type=int)

    val = sub.add_parser("validate", help="check every task is solvable and its step bound is exact")
    val.add_argument("--suite")

    met = sub.add_parser("metrics", help="success rate and average steps from an outcomes file")
    met.add_argument("--from", dest="source", required=True)
    return p


def load_config(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    try:
        doc = yaml.safe_load(p.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, Mapping):
        raise ConfigError("config must be a mapping")
    out = {}
    for k, v in doc.items():
        key = str(k).replace("-", "_")
        if key not in RUN_DEFAULTS:
            raise ConfigError(f"unknown config key {k!r}")
        out[key] = v
    return out


def resolve_options(args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then the config file, then explicit flags."""
    opts = dict(RUN_DEFAULTS)
    if getattr(args, "config", None):
        opts.update(load_config(args.config))
    for k in RUN_DEFAULTS:
        v = getattr(args, k, None)
        if v is not None:
            opts[k] = v
    if opts["planner"] not in PLANNERS:
        raise ConfigError(f"unknown planner {opts['planner']!r}")
    return opts


def _select(suite: Suite, groups: str | Sequence[str] | None) -> Suite:
    if not groups:
        return suite
    want = [g.strip() for g in groups.split(",")] if isinstance(groups, str) else list(groups)
    unknown = set(want) - set(suite.groups())
    if unknown:
        raise ConfigError(f"unknown group(s): {', '.join(sorted(unknown))}")
    return Suite(tuple(t for t in suite.tasks if t.group in want), suite.digest, suite.path)


def cmd_run(args) -> int:
    o = resolve_options(args)
    suite = _select(load_suite(o["suite"]), o["groups"])
    cfg = RunConfig(
        planner=o["planner"], trials=int(o["trials"]), base_seed=int(o["seed"]), max_ticks=int(o["max_ticks"]),
        llm_mode=o["llm_mode"], transcripts=o["transcripts"],
        mcts_budget=int(o["mcts_budget"]), mcts_depth=int(o["mcts_depth"]),
    )
    report = run_benchmark(suite, config=cfg, workers=int(o["workers"]))
    out = Path(o["out"])
    emit_report(report, out)
    if o["traces"]:
        write_traces(report, out / "traces")
    sys.stdout.write(summary_text(summary([report])))
    return 0


def cmd_validate(args) -> int:
    suite = load_suite(args.suite)
    bad = 0
    for row in audit_suite(suite):
        status = "ok" if row.ok else "FAIL"
        bad += not row.ok
        print(f"{row.task}  min_steps={row.min_steps}  expected={row.expected}  unsolvable_starts={row.infeasible_starts}  {status}")
    print(f"{len(suite.tasks) - bad}/{len(suite.tasks)} tasks ok")
    return 1 if bad else 0


def metrics_from(doc: Any) -> dict[str, dict]:
    """Metrics from a report, a list of cells, or a mapping of row name to cells.

    Cells are tick counts, or ``x`` / null for failures.
    """
    if isinstance(doc, Mapping) and "outcomes" in doc:
        r = BenchmarkReport.from_dict(doc)
        return summary([r])[r.planner]
    if isinstance(doc, list):
        return {"all": metrics_dict(compute_metrics(doc))}
    if isinstance(doc, Mapping):
        out = {}
        for name, cells in doc.items():
            if isinstance(cells, Mapping):
                for sub, c in cells.items():
                    out[f"{name}/{sub}"] = metrics_dict(compute_metrics(c))
            else:
                out[str(name)] = metrics_dict(compute_metrics(cells))
        return out
    raise ConfigError("outcomes file must hold a report, a list or a mapping")


def cmd_metrics(args) -> int:
    p = Path(args.source)
    try:
        doc = yaml.safe_load(p.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read {p}: {exc}") from None
    print(json.dumps(metrics_from(doc), indent=2, sort_keys=True))
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return {"run": cmd_run, "validate": cmd_validate, "metrics": cmd_metrics}[args.command](args)
    except HetBTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
