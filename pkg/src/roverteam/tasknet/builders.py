"""Builders for the exploration and formation-sensing task networks."""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .. import resources
from .model import (
    LEADER,
    TEAM,
    Constraint,
    Impact,
    ImpactKind,
    Locus,
    Scope,
    StateVariable,
    Status,
    TaskInstance,
    TaskNetwork,
    TaskTemplate,
    VarKind,
    after,
    equals,
    var_label,
    within,
)

# Cross-cycle links accept any terminal status so a skipped cycle cannot stall the next.
DONE_OR_STOPPED = (Status.COMPLETED, Status.FAILED, Status.ABORTED, Status.DROPPED)


@dataclass(frozen=True)
class NetworkConfig:
    """Durations (seconds, wake-relative) and limits used by the builders."""

    window: int = 1500
    sync_duration: int = 10
    backup_duration: int = 10
    explore_planning_duration: int = 20
    formation_planning_duration: int = 30
    drive_duration: int = 300
    min_drive_duration: int = 30
    stop_duration: int = 5
    sleep_duration: int = 60
    shutdown_guard: int = 30
    soc_floor: float = 20.0
    temp_limit: float = 65.0

    @property
    def sleep_start(self) -> int:
        return self.window - self.shutdown_guard - self.sleep_duration

    @property
    def task_horizon(self) -> int:
        return self.window - self.sleep_duration

    @property
    def drive_time_limit(self) -> int:
        return self.sleep_start - self.stop_duration


class NetworkError(ValueError):
    pass


def participation_subsets(rovers: Sequence[str]) -> list[tuple[str, ...]]:
    """All nonempty rover subsets, largest first, ties in lexicographic order."""
    members = sorted(set(rovers))
    if not members:
        raise NetworkError("participation subsets of an empty rover list")
    subsets = [c for k in range(len(members), 0, -1)
               for c in itertools.combinations(members, k)]
    return sorted(subsets, key=lambda s: (-len(s), s))


def _check_team(agents: Mapping[str, str], cycles: int) -> tuple[list[str], str]:
    rovers = sorted(a for a, r in agents.items() if r == "rover")
    bases = sorted(a for a, r in agents.items() if r == "base-station")
    unknown = [a for a, r in agents.items() if r not in ("rover", "base-station")]
    if unknown:
        raise NetworkError(f"unknown roles for {unknown}")
    if not rovers:
        raise NetworkError("at least one rover is required")
    if len(bases) != 1:
        raise NetworkError("exactly one base station is required")
    if cycles < 1:
        raise NetworkError("cycles must be >= 1")
    return rovers, bases[0]


def _variables(rovers: list[str], base: str, cfg: NetworkConfig) -> list[StateVariable]:
    out = []
    for r in rovers:
        out += [StateVariable("soc", r, VarKind.CONTINUOUS, "percent", (0.0, 100.0)),
                StateVariable("cpu_temp", r, VarKind.CONTINUOUS, "degC", (-100.0, 150.0)),
                StateVariable("participating", r, VarKind.FLAG, "enum", values=(0.0, 1.0))]
    out.append(StateVariable("cpu_temp", base, VarKind.CONTINUOUS, "degC", (-100.0, 150.0)))
    out += [StateVariable("time", TEAM, VarKind.CONTINUOUS, "s", (0.0, float(cfg.window))),
            StateVariable("coordinated", TEAM, VarKind.FLAG, "enum", values=(0.0, 1.0)),
            StateVariable("experiment_complete", TEAM, VarKind.FLAG, "enum", values=(0.0, 1.0)),
            StateVariable("survivor_available", TEAM, VarKind.FLAG, "enum", values=(0.0, 1.0))]
    return out


def _participating(r: str) -> Constraint:
    return equals((r, "participating"), 1)


def _horizon(cfg: NetworkConfig, limit: int | None = None) -> Constraint:
    return within((TEAM, "time"), high=cfg.task_horizon if limit is None else limit)


def _resource_guards(r: str, cfg: NetworkConfig) -> list[Constraint]:
    return [within((r, "soc"), low=cfg.soc_floor),
            within((r, "cpu_temp"), high=cfg.temp_limit),
            _horizon(cfg, cfg.drive_time_limit)]


def _cycle_priority(k: int) -> int:
    return 900 - 100 * k


def _common_cycle_tasks(k: int, rovers: list[str], cfg: NetworkConfig,
                        env: resources.EnvironmentModel, plan_id: str, plan_cmd: str,
                        plan_duration: int) -> list[TaskTemplate]:
    base = _cycle_priority(k)
    tasks = []
    for r in rovers:
        cons = [_participating(r), _horizon(cfg)]
        if k > 0:
            cons.append(after(f"stop.c{k - 1}.{r}", finished=DONE_OR_STOPPED,
                              waive_if=((r, "participating"), 0.0)))
        tasks.append(TaskTemplate(
            id=f"sync.c{k}.{r}", executor=r, command="ssdb_map_sync",
            duration=cfg.sync_duration, priority=base - 10, mode="sync", kind="sync",
            constraints=tuple(cons), impacts=tuple(resources.mode_impacts(env, r, "sync"))))
    backup_cons = [equals((TEAM, "survivor_available"), 1), _horizon(cfg)]
    if k > 0:
        backup_cons.append(after(f"{plan_id[:-len(str(k))]}{k - 1}",
                                 finished=DONE_OR_STOPPED))
    tasks.append(TaskTemplate(
        id=f"backup.c{k}", executor=LEADER, command="ssdb_backup",
        duration=cfg.backup_duration, priority=base - 20, mode="sync", kind="backup",
        constraints=tuple(backup_cons),
        impacts=tuple(resources.mode_impacts(env, LEADER, "sync"))))
    plan_cons = [equals((TEAM, "experiment_complete"), 0), _horizon(cfg)]
    plan_cons += [after(f"sync.c{k}.{r}", finished=DONE_OR_STOPPED,
                        waive_if=((r, "participating"), 0.0)) for r in rovers]
    tasks.append(TaskTemplate(
        id=plan_id, executor=LEADER, command=plan_cmd, duration=plan_duration,
        priority=base - 30, mode="planning", kind="planning",
        constraints=tuple(plan_cons), impacts=tuple(resources.mode_impacts(env, LEADER, "planning"))))
    return tasks


def _sleep_tasks(agents: Mapping[str, str], cfg: NetworkConfig,
                 env: resources.EnvironmentModel) -> list[TaskTemplate]:
    return [TaskTemplate(
        id=f"sleep.{a}", executor=a, command="enter_low_power",
        duration=cfg.sleep_duration, priority=1000, preferred_start=cfg.sleep_start,
        mode="low-power", kind="sleep",
        impacts=tuple(resources.mode_impacts(env, a, "low-power", has_battery=role == "rover")))
        for a, role in sorted(agents.items())]


def build_exploration_network(agents: Mapping[str, str], region: float = 1700.0,
                              cycles: int = 3, config: NetworkConfig | None = None,
                              env: resources.EnvironmentModel | None = None) -> TaskNetwork:
    """Exploration experiment: sync, plan, independent per-rover drives."""
    cfg = config or NetworkConfig()
    env = env or resources.EnvironmentModel()
    rovers, base = _check_team(agents, cycles)
    tasks: list[TaskTemplate] = []
    for k in range(cycles):
        plan_id = f"explore_plan.c{k}"
        tasks += _common_cycle_tasks(k, rovers, cfg, env, plan_id,
                                     "exploration_nav_planning",
                                     cfg.explore_planning_duration)
        p = _cycle_priority(k)
        for r in rovers:
            cons = [_participating(r), after(plan_id), *_resource_guards(r, cfg)]
            if k > 0:
                cons.append(after(f"explore_drive.c{k - 1}.{r}", finished=DONE_OR_STOPPED))
            tasks.append(TaskTemplate(
                id=f"explore_drive.c{k}.{r}", executor=r, command="drive_explore",
                cleanup="stop_motors", duration=cfg.drive_duration, priority=p - 40,
                mode="driving", kind="exploration", min_duration=cfg.min_drive_duration,
                constraints=tuple(cons), impacts=tuple(resources.mode_impacts(env, r, "driving"))))
        for r in rovers:
            tasks.append(TaskTemplate(
                id=f"stop.c{k}.{r}", executor=r, command="stop_drive",
                duration=cfg.stop_duration, priority=p - 60, mode="idle", kind="stop",
                constraints=(_horizon(cfg),
                             after(f"explore_drive.c{k}.{r}", finished=DONE_OR_STOPPED))))
    tasks += _sleep_tasks(agents, cfg, env)
    return TaskNetwork(tasks, _variables(rovers, base, cfg), dict(agents),
                       name=f"exploration(region={region:g})")


def build_formation_network(agents: Mapping[str, str], cycles: int = 3,
                            config: NetworkConfig | None = None,
                            env: resources.EnvironmentModel | None = None) -> TaskNetwork:
    """Distributed sensing: one alternate parent hierarchy per rover subset."""
    cfg = config or NetworkConfig()
    env = env or resources.EnvironmentModel()
    rovers, base = _check_team(agents, cycles)
    subsets = participation_subsets(rovers)
    tasks: list[TaskTemplate] = []
    coordinated = (TEAM, "coordinated")
    for k in range(cycles):
        plan_id = f"formation_plan.c{k}"
        tasks += _common_cycle_tasks(k, rovers, cfg, env, plan_id,
                                     "formation_nav_planning",
                                     cfg.formation_planning_duration)
        p = _cycle_priority(k)
        prev_parents = [_parent_id(k - 1, s) for s in subsets] if k > 0 else []
        for subset in subsets:
            pid = _parent_id(k, subset)
            subs = []
            for r in subset:
                subs.append(TaskTemplate(
                    id=f"{pid}/{r}", executor=r, command="drive_formation",
                    cleanup="stop_motors", duration=cfg.drive_duration, priority=p - 50 + len(subset),
                    mode="driving", kind="formation", pinned_to_parent=True,
                    constraints=(_participating(r), *_resource_guards(r, cfg),
                                 equals(coordinated, 1, Scope.MAINTENANCE, Locus.MULTI)),
                    impacts=tuple(resources.mode_impacts(env, r, "driving"))))
            cons: list[Constraint] = [after(plan_id)]
            if prev_parents:
                cons.append(after(*prev_parents, finished=DONE_OR_STOPPED))
            for c in (c for s in subs for c in s.constraints):
                if c not in cons:
                    cons.append(c)
            cons += [equals((r, "participating"), 0, Scope.PRE, Locus.MULTI)
                     for r in rovers if r not in subset]
            impacts = [i for s in subs for i in s.impacts]
            impacts += [Impact(coordinated, ImpactKind.START, 1.0),
                        Impact(coordinated, ImpactKind.END, -1.0)]
            tasks.append(TaskTemplate(
                id=pid, executor=LEADER, command="formation_drive",
                duration=cfg.drive_duration, priority=p - 50 + len(subset),
                mode="driving", kind="formation", min_duration=cfg.min_drive_duration,
                constraints=tuple(cons), impacts=tuple(impacts), subtasks=tuple(subs)))
        for r in rovers:
            preds = [_parent_id(k, s) for s in subsets if r in s]
            tasks.append(TaskTemplate(
                id=f"stop.c{k}.{r}", executor=r, command="stop_drive",
                duration=cfg.stop_duration, priority=p - 60, mode="idle", kind="stop",
                constraints=(_horizon(cfg),
                             after(*preds, finished=DONE_OR_STOPPED))))
    tasks += _sleep_tasks(agents, cfg, env)
    return TaskNetwork(tasks, _variables(rovers, base, cfg), dict(agents),
                       name="formation")


def _parent_id(k: int, subset: Sequence[str]) -> str:
    return f"formation.c{k}.{'+'.join(subset)}"


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class Finding:
    kind: str
    message: str
    tasks: tuple[str, ...] = ()


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    def __bool__(self) -> bool:
        return not self.findings

    @property
    def ok(self) -> bool:
        return not self.findings

    def kinds(self) -> set[str]:
        return {f.kind for f in self.findings}

    def add(self, kind: str, message: str, *tasks: str) -> None:
        self.findings.append(Finding(kind, message, tasks))


class InvalidNetwork(ValueError):
    def __init__(self, report: ValidationReport):
        super().__init__("; ".join(f.message for f in report.findings))
        self.report = report


def _var_known(net: TaskNetwork, key) -> bool:
    owner, name = key
    if owner == LEADER:
        return any(v.name == name for v in net.variables)
    return any(v.key == key for v in net.variables)


def _find_cycles(edges: dict[str, set[str]]) -> list[list[str]]:
    """Strongly connected components with more than one node (or a self loop)."""
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    stack: list[str] = []
    on_stack: set[str] = set()
    out: list[list[str]] = []
    counter = itertools.count()

    def visit(v: str) -> None:
        index[v] = low[v] = next(counter)
        stack.append(v)
        on_stack.add(v)
        for w in sorted(edges.get(v, ())):
            if w not in index:
                visit(w)
                low[v] = min(low[v], low[w])
            elif w in on_stack:
                low[v] = min(low[v], index[w])
        if low[v] == index[v]:
            comp = []
            while True:
                w = stack.pop()
                on_stack.discard(w)
                comp.append(w)
                if w == v:
                    break
            if len(comp) > 1 or v in edges.get(v, ()):
                out.append(sorted(comp))

    for v in sorted(edges):
        if v not in index:
            visit(v)
    return out


def validate_network(net: TaskNetwork) -> ValidationReport:
    report = ValidationReport()
    templates = list(net.all_templates())
    ids = Counter(t.id for t in templates)
    for tid, n in sorted(ids.items()):
        if n > 1:
            report.add("duplicate", f"task id {tid} defined {n} times", tid)
    keys = Counter((t.priority, t.id) for t in templates)
    for (prio, tid), n in sorted(keys.items()):
        if n > 1:
            report.add("duplicate", f"(priority {prio}, id {tid}) repeated", tid)
    var_keys = Counter(v.key for v in net.variables)
    for key, n in var_keys.items():
        if n > 1:
            report.add("duplicate", f"variable {var_label(key)} defined {n} times")
    flags = {v.key for v in net.variables if v.kind is VarKind.FLAG}

    edges: dict[str, set[str]] = {}
    for t in templates:
        if t.duration <= 0:
            report.add("duration", f"{t.id}: duration must be positive", t.id)
        if t.instance_count < 1:
            report.add("instances", f"{t.id}: instance count must be >= 1", t.id)
        if t.min_duration is not None and not 0 < t.min_duration <= t.duration:
            report.add("duration", f"{t.id}: bad minimum duration", t.id)
        for c in t.constraints:
            if c.scope is Scope.PRECEDENCE:
                for p in c.predecessors:
                    if p not in ids:
                        report.add("dangling", f"{t.id}: precedence on unknown task {p}", t.id)
                    else:
                        edges.setdefault(t.id, set()).add(p)
                if c.waive_if and not _var_known(net, c.waive_if[0]):
                    report.add("dangling", f"{t.id}: waiver on unknown variable", t.id)
                continue
            if not _var_known(net, c.variable):
                report.add("dangling", f"{t.id}: unknown variable {var_label(c.variable)}", t.id)
                continue
            is_flag = c.variable in flags or (c.variable[0] == LEADER and c.values is not None)
            if is_flag != (c.values is not None):
                report.add("condition", f"{t.id}: condition kind does not match "
                           f"{var_label(c.variable)}", t.id)
            if c.locus is Locus.MULTI and c.variable[0] not in (TEAM,) \
                    and c.variable[0] == t.executor:
                report.add("locus", f"{t.id}: multi-agent constraint on its own "
                           f"variable {var_label(c.variable)}", t.id)
        for imp in t.impacts:
            if not _var_known(net, imp.variable):
                if imp.variable[0] == LEADER:
                    continue
                report.add("dangling", f"{t.id}: impact on unknown variable "
                           f"{var_label(imp.variable)}", t.id)
            elif imp.kind is ImpactKind.RATE and imp.variable in flags:
                report.add("impact", f"{t.id}: linear rate on flag "
                           f"{var_label(imp.variable)}", t.id)
        if t.subtasks:
            _check_hierarchy(t, report)
    for comp in _find_cycles(edges):
        report.add("cycle", f"precedence cycle among {', '.join(comp)}", *comp)
    return report


def _check_hierarchy(parent: TaskTemplate, report: ValidationReport) -> None:
    sub_cons = {c for s in parent.subtasks for c in s.state_constraints()}
    missing = sub_cons - set(parent.constraints)
    if missing:
        report.add("hierarchy", f"{parent.id}: missing {len(missing)} subtask constraint(s)",
                   parent.id)
    own = Counter(i for i in parent.impacts if i.variable[0] != TEAM)
    union = Counter(i for s in parent.subtasks for i in s.impacts)
    if own != union:
        report.add("hierarchy", f"{parent.id}: impacts differ from union of subtask impacts",
                   parent.id)
    for s in parent.subtasks:
        if not s.pinned_to_parent:
            report.add("hierarchy", f"{s.id}: subtask not pinned to parent", s.id)
        if s.subtasks:
            report.add("hierarchy", f"{s.id}: nested decomposition", s.id)


def expand_instances(net: TaskNetwork) -> list[TaskInstance]:
    """One unscheduled instance per (template, index); subtasks appear at plan time."""
    report = validate_network(net)
    if not report.ok:
        raise InvalidNetwork(report)
    return [TaskInstance(t, i) for t in net.tasks for i in range(t.instance_count)]
