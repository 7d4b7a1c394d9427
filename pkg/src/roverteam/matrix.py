"""Task-kind by execution-behavior test matrix.

Each applicable cell is an independent simulation with one scripted fault;
its trace is checked against the response expected for that behavior.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

from . import audit
from .mission import FaultSpec, RunResult, Scenario, Simulation, default_team
from .scheduler import template_of
from .tasknet import Scope, TaskNetwork

BEHAVIORS = ("nominal", "starts-late", "runs-late", "ends-early", "fails")


@dataclass(frozen=True)
class Row:
    label: str
    kind: str
    mission: str
    behaviors: tuple[str, ...]


ROWS = (
    Row("SSDB Sync", "sync", "exploration",
        ("nominal", "runs-late", "ends-early", "fails")),
    Row("Team Planning", "planning", "exploration", BEHAVIORS),
    Row("Formation", "formation", "formation", BEHAVIORS),
    Row("Exploration", "exploration", "exploration", BEHAVIORS),
    Row("Stop", "stop", "exploration", ("nominal", "starts-late")),
    Row("Sleep", "sleep", "exploration", ("nominal", "starts-late")),
)

# Fault sizes per task kind; early ends and failures scale with task length.
AMOUNTS = {
    "starts-late": {"default": 10.0},
    "runs-late": {"default": 20.0},
    "ends-early": {"sync": 5.0, "planning": 10.0, "default": 60.0},
    "fails": {"sync": 5.0, "planning": 10.0, "exploration": 60.0, "formation": 120.0,
              "default": 30.0},
}


def row(label: str) -> Row:
    for r in ROWS:
        if r.label == label or r.kind == label:
            return r
    raise KeyError(label)


def cell_fault(r: Row, behavior: str, rovers: list[str]) -> FaultSpec:
    table = AMOUNTS.get(behavior, {})
    amount = table.get(r.kind, table.get("default", 0.0))
    # A single failing participant is the interesting case for coordinated work.
    agent = rovers[0] if behavior == "fails" and r.kind in ("formation", "exploration") else None
    return FaultSpec(r.kind, behavior, amount, agent=agent, cycle=_cycle(r), window=0)


def _cycle(r: Row) -> int | None:
    return None if r.kind == "sleep" else 0


def base_scenario(mission: str, seed: int = 0, rovers: int = 3) -> Scenario:
    return Scenario(name=f"{mission}-base", mission=mission, agents=default_team(rovers),
                    seed=seed)


def cell_scenario(r: Row, behavior: str, seed: int = 0, aborts_enabled: bool = True,
                  base: Scenario | None = None) -> Scenario:
    scen = base_scenario(r.mission, seed) if base is None else Scenario.from_dict(base.to_dict())
    scen.mission = r.mission
    scen.seed = seed
    scen.aborts_enabled = aborts_enabled
    scen.name = f"{r.label} x {behavior}"
    rovers = sorted(a.id for a in scen.agents if a.role == "rover")
    scen.faults = [cell_fault(r, behavior, rovers)]
    return scen


# ---------------------------------------------------------------------------
# Checks


@dataclass
class CellResult:
    row: str
    behavior: str
    status: str
    detail: str = ""
    trace_hash: str = ""
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.status == "pass"


class _Facts:
    """Trace views shared by the per-behavior checks."""

    def __init__(self, run: RunResult, network: TaskNetwork):
        self.run = run
        self.trace = run.trace
        self.network = network
        self.execs = audit.executions(run.trace)
        self.faults = [r for r in audit.of_kind(run.trace, "fault")]
        keys = {(f["payload"]["window"], f["agent"], f["payload"]["task"]) for f in self.faults}
        self.affected = [ex for k, ex in sorted(self.execs.items()) if k in keys]
        self.plans = list(audit.of_kind(run.trace, "plan"))
        w0 = audit.window_starts(run.trace)
        self.w0 = w0.get(0, 0.0)

    def successors(self, task_id: str) -> set[str]:
        top = task_id.split("/")[0]
        tid = template_of(top)
        out = set()
        for t in self.network.all_templates():
            for c in t.constraints:
                if c.scope is Scope.PRECEDENCE and tid in c.predecessors:
                    out.add(t.id)
        return out

    def starts_of(self, template_ids: set[str]) -> dict[str, float]:
        return {ex.task: ex.start for ex in self.execs.values()
                if ex.window == 0 and ex.start is not None and template_of(ex.task) in template_ids}

    def replans(self, trigger: str, after: float) -> list[dict]:
        return [p for p in self.plans
                if p["payload"]["trigger"] == trigger and p["time"] >= after - 1e-9]


def _planned(ex: audit.Execution, w0: float) -> tuple[float, float]:
    return w0 + ex.planned[0], w0 + ex.planned[1]


def _check_nominal(f: _Facts, base: _Facts, spec: FaultSpec) -> str | None:
    if audit.interrupted(f.trace):
        return "tasks interrupted by shutdown"
    # The scenario header names the run; everything after it must match.
    if [r for r in f.trace if r["kind"] != "scenario"] != \
            [r for r in base.trace if r["kind"] != "scenario"]:
        return "nominal script changed the trace"
    return None


def _check_starts_late(f: _Facts, base: _Facts, spec: FaultSpec) -> str | None:
    for ex in f.affected:
        start, _ = _planned(ex, f.w0)
        if ex.status == "completed":
            if ex.start is None or ex.start - start < spec.amount - 0.5:
                return f"{ex.task} started at {ex.start}, planned {start}"
        elif not (ex.status == "failed" and ex.reason == "not-ready"):
            return f"{ex.task} ended {ex.status} ({ex.reason})"
    return None


def _shift(f: _Facts, base: _Facts, direction: Callable[[float, float], bool]) -> str | None:
    succ: set[str] = set()
    for ex in f.affected:
        succ |= f.successors(ex.task)
    mine, theirs = f.starts_of(succ), base.starts_of(succ)
    common = sorted(set(mine) & set(theirs))
    if not common:
        return "no downstream task ran in both runs"
    # Successors committed before the deviation was visible cannot move; at
    # least one must shift the expected way and none the opposite way.
    moved = [t for t in common if direction(mine[t], theirs[t])]
    wrong = [t for t in common if direction(theirs[t], mine[t])]
    if not moved or wrong:
        return "downstream starts " + ", ".join(
            f"{t} {mine[t]} vs nominal {theirs[t]}" for t in common)
    return None


def _check_runs_late(f: _Facts, base: _Facts, spec: FaultSpec) -> str | None:
    for ex in f.affected:
        if ex.status != "completed" or ex.start is None:
            return f"{ex.task} ended {ex.status}"
        planned = ex.planned[1] - ex.planned[0]
        if ex.end - ex.start < planned + spec.amount - 1:
            return f"{ex.task} ran {ex.end - ex.start}s"
    first = min(ex.start for ex in f.affected)
    if not f.replans("conflict-detected", first):
        return "no replan after the overrun"
    return _shift(f, base, lambda a, b: a > b)


def _check_ends_early(f: _Facts, base: _Facts, spec: FaultSpec) -> str | None:
    for ex in f.affected:
        if ex.status != "completed" or ex.start is None:
            return f"{ex.task} ended {ex.status}"
        planned = ex.planned[1] - ex.planned[0]
        if ex.end - ex.start > planned - spec.amount + 1:
            return f"{ex.task} ran {ex.end - ex.start}s"
    first = min(ex.end for ex in f.affected)
    if not f.replans("milestone-complete", first):
        return "no replan after the early completion"
    return _shift(f, base, lambda a, b: a < b)


def _check_fails(f: _Facts, base: _Facts, spec: FaultSpec) -> str | None:
    for ex in f.affected:
        if ex.status != "failed":
            return f"{ex.task} ended {ex.status}"
    first = min(ex.end for ex in f.affected)
    if not f.replans("task-failure", first):
        return "no replan after the failure"
    if spec.kind == "formation":
        for ex in f.affected:
            parent = ex.task.split("/")[0]
            for other in f.execs.values():
                if other.task.startswith(parent + "/") and other.agent != ex.agent \
                        and other.window == ex.window and other.status != "aborted":
                    return f"sibling {other.task} ended {other.status}"
    if spec.kind == "planning":
        succ: set[str] = set()
        for ex in f.affected:
            succ |= {s for s in f.successors(ex.task) if s.startswith("explore_drive")}
        ran = f.starts_of(succ)
        if ran:
            return f"dependent drives ran: {sorted(ran)}"
    return None


CHECKS = {"nominal": _check_nominal, "starts-late": _check_starts_late,
          "runs-late": _check_runs_late, "ends-early": _check_ends_early,
          "fails": _check_fails}


def check_cell(r: Row, behavior: str, run: RunResult, network: TaskNetwork,
               baseline: RunResult) -> str | None:
    """None when the run shows the expected response, else a reason."""
    f = _Facts(run, network)
    base = _Facts(baseline, network)
    spec = cell_fault(r, behavior, sorted(network.rovers))
    if run.warnings:
        return "; ".join(run.warnings)
    if audit.execution_violations(run.trace):
        return "execution-time constraint violation"
    if behavior != "nominal" and not f.affected:
        return "fault never applied"
    return CHECKS[behavior](f, base, spec)


# ---------------------------------------------------------------------------
# Matrix


@dataclass
class MatrixReport:
    seed: int
    cells: list[CellResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.status != "fail" for c in self.cells)

    def cell(self, label: str, behavior: str) -> CellResult:
        for c in self.cells:
            if c.row == label and c.behavior == behavior:
                return c
        raise KeyError((label, behavior))

    def render(self) -> str:
        width = max(len(r.label) for r in ROWS)
        head = " " * width + " | " + " | ".join(f"{b:^11}" for b in BEHAVIORS)
        lines = [head, "-" * len(head)]
        for r in ROWS:
            marks = []
            for b in BEHAVIORS:
                c = self.cell(r.label, b)
                marks.append(f"{c.status.upper():^11}")
            lines.append(f"{r.label:<{width}} | " + " | ".join(marks))
        failures = [c for c in self.cells if c.status == "fail"]
        for c in failures:
            lines.append(f"FAIL {c.row} x {c.behavior}: {c.detail}")
        return "\n".join(lines)


def run_cell(label: str, behavior: str, seed: int = 0, aborts_enabled: bool = True,
             baseline: RunResult | None = None, base: Scenario | None = None) -> CellResult:
    r = row(label)
    if behavior not in r.behaviors:
        return CellResult(r.label, behavior, "skip", "not applicable")
    t0 = time.perf_counter()
    if baseline is None:
        base_scen = base_scenario(r.mission, seed) if base is None else base
        baseline = Simulation(base_scen, seed).run()
    sim = Simulation(cell_scenario(r, behavior, seed, aborts_enabled, base), seed)
    try:
        run = sim.run()
    except Exception as exc:  # an uncaught error is itself a cell failure
        return CellResult(r.label, behavior, "fail", f"error: {exc!r}",
                          seconds=time.perf_counter() - t0)
    reason = check_cell(r, behavior, run, sim.network, baseline)
    return CellResult(r.label, behavior, "pass" if reason is None else "fail", reason or "",
                      run.trace_hash, time.perf_counter() - t0)


def run_matrix(seed: int = 0, aborts_enabled: bool = True,
               progress: Callable[[CellResult], None] | None = None,
               bases: dict[str, Scenario] | None = None) -> MatrixReport:
    report = MatrixReport(seed)
    baselines: dict[str, RunResult] = {}
    for r in ROWS:
        base = (bases or {}).get(r.mission)
        if r.mission not in baselines:
            scen = base_scenario(r.mission, seed) if base is None else base
            baselines[r.mission] = Simulation(scen, seed).run()
        for b in BEHAVIORS:
            c = run_cell(r.label, b, seed, aborts_enabled, baselines[r.mission], base)
            report.cells.append(c)
            if progress is not None:
                progress(c)
    return report
