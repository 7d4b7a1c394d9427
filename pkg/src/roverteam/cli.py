"""Command-line runner: one-shot batch planning, full simulation and the
task-by-behavior matrix.

Exit status is 0 when the run shows no acceptance-relevant problem, 1 when
it does and 2 for unusable input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import __version__, audit
from .matrix import run_matrix
from .mission import Scenario, ScenarioError, Simulation
from .resources import EnvironmentModel, background_rates
from .scheduler import SchedulerConfig, StateSnapshot, plan_priority_insertion
from .tasknet import (
    TEAM,
    NetworkConfig,
    ParseError,
    Status,
    TaskNetwork,
    expand_instances,
    load_network,
)

CONFIG_DIR_ENV = "ROVERTEAM_CONFIG_DIR"
log = logging.getLogger("roverteam")


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# Inputs


def resolve_path(path: str) -> Path:
    """Use ``path`` as given, else look it up in the default config dir."""
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    base = os.environ.get(CONFIG_DIR_ENV)
    if base and (Path(base) / p).exists():
        return Path(base) / p
    return p


def _read(path: Path) -> str:
    try:
        return path.read_text()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None


# Values assumed for variables a state file leaves out.
_DEFAULTS = {"soc": 80.0, "cpu_temp": 30.0, "participating": 1.0, "coordinated": 0.0,
             "experiment_complete": 0.0, "survivor_available": 1.0}


def load_snapshot(text: str, network: TaskNetwork, source: str = "state") -> StateSnapshot:
    """Parse a JSON state file: ``{"time", "leader", "values", "statuses"}``.

    Value keys are ``"agent.variable"``; missing variables take defaults.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{source}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise InputError(f"{source}:1: expected a JSON object")
    t = int(data.get("time", 0))
    leader = data.get("leader") or next(
        (a for a, r in sorted(network.agents.items()) if r == "base-station"), None)
    values: dict = {}
    for v in network.variables:
        if v.key == (TEAM, "time"):
            values[v.key] = float(t)
        elif v.name in _DEFAULTS:
            values[v.key] = _DEFAULTS[v.name]
    known = {f"{k[0]}.{k[1]}": k for k in values}
    for name, value in (data.get("values") or {}).items():
        if name not in known:
            raise InputError(f"{source}: unknown variable {name!r}")
        values[known[name]] = float(value)
    statuses = {}
    for tid, st in (data.get("statuses") or {}).items():
        try:
            statuses[tid] = Status(st)
        except ValueError:
            raise InputError(f"{source}: unknown status {st!r} for {tid}") from None
    return StateSnapshot(t, values, statuses, leader)


# ---------------------------------------------------------------------------
# Modes


def run_batch(network_path: Path, state_path: Path | None, out: Path | None,
              window_end: int | None = None) -> int:
    try:
        net = load_network(_read(network_path))
    except ParseError as exc:
        raise InputError(f"{network_path}: {exc}") from None
    snap = load_snapshot(_read(state_path), net, str(state_path)) if state_path else \
        load_snapshot("{}", net)
    cfg = NetworkConfig()
    end = window_end if window_end is not None else cfg.window - cfg.shutdown_guard
    instances = [i for i in expand_instances(net) if i.id not in snap.statuses]
    plan = plan_priority_insertion(
        instances, snap, (snap.time, end),
        background=background_rates(net, EnvironmentModel()), config=SchedulerConfig())
    problems = plan.verify()
    check = "feasibility self-check: " + ("ok" if not problems else
                                          f"{len(problems)} problem(s)")
    lines = [f"{e.start:>5} {e.end:>5} {e.executor:<10} {e.id}" for e in plan.scheduled()]
    lines += [f"rejected {r}" for r in plan.rejected]
    lines += problems + [check]
    print("\n".join(lines))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "plan.jsonl").write_text(plan.to_jsonl())
        (out / "check.txt").write_text("\n".join(problems + [check]) + "\n")
    return 0 if not problems else 1


def write_timeline(path: Path, trace: list[dict]) -> None:
    rows = audit.timeline_rows(trace)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["time", "agent", "mode", "soc", "temp"])
        w.writeheader()
        w.writerows(rows)


def run_sim(scenario: Scenario, seed: int | None, out: Path | None) -> int:
    result = Simulation(scenario, seed).run()
    report = audit.run_report(result.trace, result.trace_hash)
    print(report.text())
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "trace.jsonl").write_text(result.jsonl())
        write_timeline(out / "timeline.csv", result.trace)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2,
                                                    sort_keys=True) + "\n")
        (out / "report.txt").write_text(report.text() + "\n")
    for w in result.warnings:
        log.warning(w)
    return 0 if report.ok else 1


def run_matrix_mode(scenario: Scenario | None, seed: int, out: Path | None,
                    aborts_enabled: bool = True) -> int:
    bases = None
    if scenario is not None:
        bases = {}
        for mission in ("exploration", "formation"):
            s = Scenario.from_dict(scenario.to_dict())
            s.mission, s.faults, s.name = mission, [], f"{mission}-base"
            bases[mission] = s

    def progress(cell):
        log.info("%s x %s: %s %s", cell.row, cell.behavior, cell.status, cell.detail)

    report = run_matrix(seed, aborts_enabled, progress, bases)
    text = report.render()
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "matrix.txt").write_text(text + "\n")
        (out / "matrix.json").write_text(json.dumps(
            [c.__dict__ for c in report.cells], indent=2) + "\n")
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="roverteam",
        description="Plan, simulate and stress-test a multi-rover team.",
        epilog=f"Relative input paths are also looked up in ${CONFIG_DIR_ENV}.")
    p.add_argument("path", nargs="?",
                   help="scenario JSON (sim, matrix) or task network file (batch)")
    p.add_argument("--mode", choices=("batch", "sim", "matrix"), default="sim")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--out", type=Path, default=None, help="directory for output files")
    p.add_argument("--state", help="batch mode: JSON state snapshot")
    p.add_argument("--window-end", type=int, default=None,
                   help="batch mode: last planning second")
    p.add_argument("--disable-aborts", action="store_true",
                   help="matrix mode: turn off coordinated aborts (mutation check)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    try:
        if args.mode == "batch":
            if not args.path:
                raise InputError("batch mode needs a task network file")
            state = resolve_path(args.state) if args.state else None
            return run_batch(resolve_path(args.path), state, args.out, args.window_end)
        scenario = None
        if args.path:
            scenario = Scenario.load(resolve_path(args.path))
        if args.mode == "sim":
            if scenario is None:
                raise InputError("sim mode needs a scenario file")
            return run_sim(scenario, args.seed, args.out)
        seed = args.seed if args.seed is not None else (scenario.seed if scenario else 0)
        return run_matrix_mode(scenario, seed, args.out, not args.disable_aborts)
    except (InputError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
