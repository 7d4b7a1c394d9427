"""Greedy priority-insertion scheduler and the leader's plan/commit loop.

Times are integer seconds on a 1 s grid, relative to the current wake
window.  Candidate starts are evaluated in vectorized chunks against
per-second profiles of every affected variable, so the first feasible
start found is exactly the earliest one on the grid.

Feasibility of placing task X at start ``s`` with duration ``d``:

* ``s >= max(window start, preferred start)`` and ``s + d <= window end``;
* no overlap ``[s, s+d)`` with a conflicting task on any executor X occupies;
* every precedence is waived, finished, or has a planned predecessor that
  ends at or before ``s`` (plus a handoff gap across agents);
* X's pre-execution constraints hold at ``s`` on the profile without X;
* X's maintenance constraints hold at the grid points ``s .. s+d-1``
  (right-continuous) and at the left limit of ``s+d``;
* constraints of already placed tasks still hold with X added, except at
  points where they were already violated before X was considered.

A task with ``min_duration`` is shortened to the longest duration that keeps
its own maintenance constraints satisfied, provided it stays at or above the
minimum.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .messages import CommitTask, StatusReport
from .resources import ScheduledImpact, Timeline, project_timeline
from .tasknet.model import (
    LEADER,
    Constraint,
    ImpactKind,
    Scope,
    Status,
    TaskInstance,
    TaskNetwork,
    TaskTemplate,
    VarKey,
    instance_id,
)

TOL = 1e-9
CHUNK = 64

# Pairs of modes that may share an executor.
COMPATIBLE_MODES = frozenset({frozenset({"sync"}), frozenset({"sync", "planning"})})


def modes_conflict(a: str, b: str) -> bool:
    return frozenset({a, b}) not in COMPATIBLE_MODES


def template_of(task_id: str) -> str:
    return task_id.split("#", 1)[0]


@dataclass(frozen=True)
class SchedulerConfig:
    commit_window: int = 5
    handoff_gap: int = 2
    overrun_extension: int = 10
    overrun_grace: int = 2
    max_inner_factor: int = 2
    divergence: float = 2.0
    response_timeout: int = 40


@dataclass
class StateSnapshot:
    """Planning inputs: current variable values and known task statuses."""

    time: int
    values: dict[VarKey, float]
    statuses: dict[str, Status] = field(default_factory=dict)
    leader: str | None = None
    ages: dict[VarKey, float] = field(default_factory=dict)

    def resolve(self, owner: str) -> str | None:
        return self.leader if owner == LEADER else owner


@dataclass
class PlanEntry:
    id: str
    template: TaskTemplate
    executor: str
    start: int
    end: int
    status: Status = Status.SCHEDULED
    parent: str | None = None
    impacts: tuple[ScheduledImpact, ...] = ()
    constraints: tuple[Constraint, ...] = ()
    occupies: tuple[tuple[str, str], ...] = ()

    @property
    def pinned(self) -> bool:
        return self.status in (Status.COMMITTED, Status.EXECUTING)

    def record(self) -> dict:
        return {"id": self.id, "executor": self.executor, "start": self.start,
                "end": self.end, "status": self.status.value}


class ReplanKind(str, enum.Enum):
    FAILURE = "task-failure"
    MULTI_AGENT = "multi-agent-conflict"
    MILESTONE = "milestone-complete"
    COMMIT_PASS = "commit-window-pass"
    CONFLICT = "conflict-detected"
    ACTIVATION = "activation"


@dataclass(frozen=True)
class ReplanTrigger:
    kind: ReplanKind
    source: str
    time: int


class WindowError(ValueError):
    pass


class InactivePlanner(RuntimeError):
    pass


@dataclass
class Plan:
    epoch: int
    window: tuple[int, int]
    now: int
    entries: dict[str, PlanEntry] = field(default_factory=dict)
    rejected: list[str] = field(default_factory=list)
    seeds: dict[VarKey, float] = field(default_factory=dict)
    background: dict[VarKey, float] = field(default_factory=dict)

    def scheduled(self) -> list[PlanEntry]:
        return sorted(self.entries.values(), key=lambda e: (e.start, e.id))

    def starts(self) -> dict[str, int]:
        return {e.id: e.start for e in self.entries.values()}

    def timeline(self, var: VarKey) -> Timeline:
        imps = [i for e in self.entries.values() for i in e.impacts if i.variable == var]
        return project_timeline(var, self.now, self.seeds[var], imps, horizon=self.window[1],
                                background_rate=self.background.get(var, 0.0))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.record(), sort_keys=True) + "\n" for e in self.scheduled())

    def verify(self, tol: float = TOL) -> list[str]:
        """Re-check every entry against the plan's own timelines."""
        problems = []
        timelines: dict[VarKey, Timeline] = {}
        for e in self.scheduled():
            for c in e.constraints:
                if c.variable not in self.seeds:
                    continue
                tl = timelines.get(c.variable) or timelines.setdefault(
                    c.variable, self.timeline(c.variable))
                own_start = sum(i.amount for i in e.impacts if i.variable == c.variable
                                and i.kind is ImpactKind.START and i.start == e.start)
                points: list[tuple[int, str, float]] = []
                if c.scope is Scope.PRE and e.status is not Status.EXECUTING and e.start >= self.now:
                    points.append((e.start, "right", own_start))
                if c.scope is Scope.MAINTENANCE:
                    points += [(t, "right", 0.0) for t in range(max(e.start, self.now), e.end)]
                    if e.end >= self.now:
                        points.append((e.end, "left", 0.0))
                for t, side, shift in points:
                    if t > self.window[1]:
                        continue
                    if not c.admits(tl.value_at(t, side) - shift, tol):
                        problems.append(f"{e.id}: {c.variable} violated at {t}")
                        break
        by_exec: dict[str, list[tuple[int, int, str, str]]] = {}
        for e in self.entries.values():
            for agent, mode in e.occupies:
                by_exec.setdefault(agent, []).append((e.start, e.end, mode, e.id))
        for agent, spans in by_exec.items():
            spans.sort()
            for i, (s1, e1, m1, id1) in enumerate(spans):
                for s2, e2, m2, id2 in spans[i + 1:]:
                    if s2 >= e1:
                        break
                    if modes_conflict(m1, m2):
                        problems.append(f"{id1} overlaps {id2} on {agent}")
        return problems


# ---------------------------------------------------------------------------
# Resolution helpers


def _resolve_constraint(c: Constraint, snap: StateSnapshot) -> Constraint | None:
    if not c.is_state or c.variable[0] != LEADER:
        return c
    owner = snap.leader
    return None if owner is None else c.with_variable((owner, c.variable[1]))


def _scheduled_impacts(t: TaskTemplate, snap: StateSnapshot, start: int, end: int,
                       include_start: bool = True) -> tuple[ScheduledImpact, ...]:
    out = []
    for imp in t.impacts:
        owner = snap.resolve(imp.variable[0])
        var = (owner, imp.variable[1])
        if owner is None or var not in snap.values:
            continue
        if imp.kind is ImpactKind.START and not include_start:
            continue
        out.append(ScheduledImpact(var, imp.kind, imp.amount, start, end))
    return tuple(out)


def _occupancy(t: TaskTemplate, snap: StateSnapshot) -> tuple[tuple[str, str], ...] | None:
    if t.subtasks:
        occ = tuple((snap.resolve(s.executor), s.mode) for s in t.subtasks)
    else:
        occ = ((snap.resolve(t.executor), t.mode),)
    if any(a is None for a, _ in occ):
        return None
    return occ


def pin_instance(inst: TaskInstance, snap: StateSnapshot,
                 config: SchedulerConfig = SchedulerConfig()) -> PlanEntry:
    """Plan entry for a committed or executing task, applying only future effects."""
    t = inst.template
    start = int(inst.scheduled_start)
    end = int(inst.scheduled_end)
    executing = inst.status is Status.EXECUTING
    if executing:
        if inst.actual_start is not None:
            shift = int(math.ceil(inst.actual_start)) - start
            start, end = start + shift, end + shift
        # A report of completion may still be in flight for a short while.
        if end + config.overrun_grace <= snap.time:
            end = snap.time + config.overrun_extension
        else:
            end = max(end, snap.time)
    cons = tuple(c for c in (_resolve_constraint(c, snap) for c in t.state_constraints())
                 if c is not None)
    occ = _occupancy(t, snap) or ()
    if inst.parent is not None:
        cons, occ = (), ()
    imps = () if inst.parent is not None else _scheduled_impacts(
        t, snap, start, end, include_start=not executing)
    return PlanEntry(inst.id, t, snap.resolve(t.executor) or t.executor, start, end,
                     inst.status, inst.parent, imps, cons, occ)


# ---------------------------------------------------------------------------
# Grid search


def _admit(c: Constraint, arr: np.ndarray) -> np.ndarray:
    if c.values is not None:
        ok = np.zeros(arr.shape, dtype=bool)
        for v in c.values:
            ok |= np.abs(arr - v) <= TOL
        return ok
    return (arr >= c.low - TOL) & (arr <= c.high + TOL)


class _Grid:
    """Per-second profiles over ``[now, th]`` for the current partial plan."""

    def __init__(self, snap: StateSnapshot, th: int, background: Mapping[VarKey, float],
                 pad: int):
        self.snap = snap
        self.now = snap.time
        self.th = th
        self.n = th - self.now + 1
        self.pad = pad
        self.background = background
        self.entries: dict[str, PlanEntry] = {}
        self._profiles: dict[VarKey, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        self._bounds: dict[VarKey, tuple] = {}
        self._busy: dict[tuple[str, str], np.ndarray] = {}

    def add(self, e: PlanEntry) -> None:
        self.entries[e.id] = e
        touched = {i.variable for i in e.impacts} | {c.variable for c in e.constraints}
        for v in touched:
            self._profiles.pop(v, None)
            self._bounds.pop(v, None)
        if e.occupies:
            self._busy.clear()

    def idx(self, t: int) -> int:
        return t - self.now

    def profile(self, var: VarKey) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Right values, left limits and step sizes at each grid second."""
        if var in self._profiles:
            return self._profiles[var]
        n = self.n
        rate_diff = np.zeros(n + 1)
        delta = np.zeros(n)
        rate_diff[0] += self.background.get(var, 0.0)
        for e in self.entries.values():
            for imp in e.impacts:
                if imp.variable != var:
                    continue
                if imp.kind is ImpactKind.RATE:
                    a, b = max(imp.start, self.now), min(imp.end, self.th)
                    if b > a:
                        rate_diff[a - self.now] += imp.amount
                        rate_diff[b - self.now] -= imp.amount
                else:
                    t = imp.start if imp.kind is ImpactKind.START else imp.end
                    if self.now <= t <= self.th:
                        delta[t - self.now] += imp.amount
        rate = np.cumsum(rate_diff)[:n]
        ramp = np.concatenate(([0.0], np.cumsum(rate[:-1])))
        right = self.snap.values[var] + ramp + np.cumsum(delta)
        left = right - delta
        right = np.concatenate((right, np.full(self.pad, right[-1])))
        left = np.concatenate((left, np.full(self.pad, left[-1])))
        self._profiles[var] = (right, left, delta)
        return self._profiles[var]

    def bounds(self, var: VarKey) -> tuple:
        """Combined bounds from placed tasks' constraints, plus suffix extrema.

        Points where the current profile already violates a constraint are
        exempt, so a stale or pinned violation does not block other work.
        """
        if var in self._bounds:
            return self._bounds[var]
        right, left, _ = self.profile(var)
        n = self.n
        lo_r, hi_r = np.full(n, -np.inf), np.full(n, np.inf)
        lo_l, hi_l = np.full(n, -np.inf), np.full(n, np.inf)
        for e in self.entries.values():
            for c in e.constraints:
                if c.variable != var:
                    continue
                lo, hi = c.bounds()
                if c.scope is Scope.PRE:
                    if e.status is Status.EXECUTING or not self.now <= e.start <= self.th:
                        continue
                    shift = sum(i.amount for i in e.impacts if i.variable == var
                                and i.kind is ImpactKind.START and i.start == e.start)
                    i0 = e.start - self.now
                    v = right[i0] - shift
                    if c.admits(v, TOL):
                        lo_r[i0] = max(lo_r[i0], lo + shift)
                        hi_r[i0] = min(hi_r[i0], hi + shift)
                    continue
                a = max(e.start, self.now) - self.now
                b = min(e.end, self.th + 1) - self.now
                if b > a:
                    seg = right[a:b]
                    ok = _admit(c, seg)
                    lo_r[a:b] = np.where(ok, np.maximum(lo_r[a:b], lo), lo_r[a:b])
                    hi_r[a:b] = np.where(ok, np.minimum(hi_r[a:b], hi), hi_r[a:b])
                ie = e.end - self.now
                if e.end > e.start and 0 <= ie < n and c.admits(left[ie], TOL):
                    lo_l[ie] = max(lo_l[ie], lo)
                    hi_l[ie] = min(hi_l[ie], hi)
        r, l_ = right[:n], left[:n]
        need_lo = np.maximum(lo_r - r, lo_l - l_)
        need_hi = np.minimum(hi_r - r, hi_l - l_)
        suf_lo = np.concatenate((np.maximum.accumulate(need_lo[::-1])[::-1], [-np.inf]))
        suf_hi = np.concatenate((np.minimum.accumulate(need_hi[::-1])[::-1], [np.inf]))
        pad_lo = np.full(self.pad, -np.inf)
        pad_hi = np.full(self.pad, np.inf)
        out = (np.concatenate((lo_r, pad_lo)), np.concatenate((hi_r, pad_hi)),
               np.concatenate((lo_l, pad_lo)), np.concatenate((hi_l, pad_hi)),
               np.concatenate((suf_lo, pad_lo)), np.concatenate((suf_hi, pad_hi)))
        self._bounds[var] = out
        return out

    def busy_prefix(self, agent: str, mode: str) -> np.ndarray:
        key = (agent, mode)
        if key in self._busy:
            return self._busy[key]
        busy = np.zeros(self.n + self.pad, dtype=np.int64)
        for e in self.entries.values():
            for a, m in e.occupies:
                if a == agent and modes_conflict(m, mode):
                    lo = max(e.start, self.now) - self.now
                    hi = min(e.end - self.now, self.n + self.pad)
                    if hi > lo:
                        busy[lo:hi] = 1
        prefix = np.concatenate(([0], np.cumsum(busy)))
        self._busy[key] = prefix
        return prefix


@dataclass
class _Candidate:
    template: TaskTemplate
    constraints: list[Constraint]
    impacts: tuple[ScheduledImpact, ...]
    occupies: tuple[tuple[str, str], ...]


def _precedence_bound(t: TaskTemplate, grid: _Grid, snap: StateSnapshot, gap: int,
                      executor: str) -> int | None:
    """Earliest start allowed by precedence, or None if unsatisfiable now."""
    bound = -math.inf
    for c in t.precedences():
        if c.waive_if is not None:
            wv, wval = c.waive_if
            owner = snap.resolve(wv[0])
            v = snap.values.get((owner, wv[1])) if owner else None
            if v is not None and abs(v - wval) <= TOL:
                continue
        preds = set(c.predecessors)
        if any(template_of(i) in preds and s in c.finished for i, s in snap.statuses.items()):
            continue
        options = [e.end + (0 if e.executor == executor else gap)
                   for e in grid.entries.values() if template_of(e.id) in preds]
        if not options:
            return None
        bound = max(bound, min(options))
    return int(bound) if bound > -math.inf else -(10 ** 9)


def find_valid_interval(t: TaskTemplate, grid: _Grid, window: tuple[int, int],
                        config: SchedulerConfig = SchedulerConfig()) -> tuple[int, int] | None:
    """Earliest feasible ``(start, end)`` for template ``t`` on the grid, or None."""
    snap = grid.snap
    executor = snap.resolve(t.executor)
    occ = _occupancy(t, snap)
    if executor is None or occ is None:
        return None
    cons = []
    for c in t.state_constraints():
        rc = _resolve_constraint(c, snap)
        if rc is None or rc.variable not in snap.values:
            return None
        cons.append(rc)
    t0, th = window
    prec = _precedence_bound(t, grid, snap, config.handoff_gap, executor)
    if prec is None:
        return None
    d = t.duration
    dmin = t.min_duration if t.min_duration is not None else d
    s_lo = max(t0, t.preferred_start, prec, grid.now)
    s_hi = th - dmin
    if s_lo > s_hi:
        return None
    imps = _scheduled_impacts(t, snap, 0, 0)
    per_var: dict[VarKey, list[float]] = {}
    for i in imps:
        acc = per_var.setdefault(i.variable, [0.0, 0.0, 0.0])
        acc[{ImpactKind.START: 0, ImpactKind.RATE: 1, ImpactKind.END: 2}[i.kind]] += i.amount
    pre = [c for c in cons if c.scope is Scope.PRE]
    maint = [c for c in cons if c.scope is Scope.MAINTENANCE]
    j = np.arange(d + 1)
    for c0 in range(s_lo, s_hi + 1, CHUNK):
        S = np.arange(c0, min(c0 + CHUNK, s_hi + 1))
        I = S - grid.now
        ok = np.ones(len(S), dtype=bool)
        for c in pre:
            right, _, _ = grid.profile(c.variable)
            ok &= _admit(c, right[I])
        if not ok.any():
            continue
        T = I[:, None] + j[None, :]
        okR = np.ones((len(S), d + 1), dtype=bool)
        okL = np.ones((len(S), d + 1), dtype=bool)
        for c in maint:
            right, left, _ = grid.profile(c.variable)
            a, r, _b = per_var.get(c.variable, (0.0, 0.0, 0.0))
            okR &= _admit(c, right[T] + a + r * j)
            okL &= _admit(c, left[T] + a + r * j)
        limit = np.minimum(d, th - S)
        if t.min_duration is None:
            dur = np.full(len(S), d)
            ok &= okR[:, :d].all(axis=1) & okL[:, d] & (limit >= d)
        else:
            bad = ~okR[:, :d]
            first_bad = np.where(bad.any(axis=1), bad.argmax(axis=1), d)
            cap = np.minimum(first_bad, limit)
            allowed = okL & (j[None, :] <= cap[:, None]) & (j[None, :] >= dmin)
            has = allowed.any(axis=1)
            dur = np.where(has, d - allowed[:, ::-1].argmax(axis=1), 0)
            ok &= has
        if not ok.any():
            continue
        for agent, mode in occ:
            prefix = grid.busy_prefix(agent, mode)
            ok &= (prefix[I + dur] - prefix[I]) == 0
        if not ok.any():
            continue
        jd = np.minimum(j[None, :], dur[:, None])
        for var, (a, r, b) in per_var.items():
            right, left, _ = grid.profile(var)
            lo_r, hi_r, lo_l, hi_l, suf_lo, suf_hi = grid.bounds(var)
            cR = a + r * jd + b * (j[None, :] >= dur[:, None])
            cL = a * (j[None, :] > 0) + r * jd + b * (j[None, :] > dur[:, None])
            vr = right[T] + cR
            vl = left[T] + cL
            ok &= ((vr >= lo_r[T] - TOL) & (vr <= hi_r[T] + TOL)
                   & (vl >= lo_l[T] - TOL) & (vl <= hi_l[T] + TOL)).all(axis=1)
            k = a + r * dur + b
            tail = I + d + 1
            ok &= (k >= suf_lo[tail] - TOL) & (k <= suf_hi[tail] + TOL)
        if ok.any():
            i = int(ok.argmax())
            return int(S[i]), int(S[i] + dur[i])
    return None


def _subtask_id(parent_id: str, parent: TaskTemplate, sub: TaskTemplate) -> str:
    if parent_id == parent.id:
        return sub.id
    return f"{sub.id}#{parent_id.split('#', 1)[1]}"


def plan_priority_insertion(instances: Sequence[TaskInstance], snapshot: StateSnapshot,
                            window: tuple[int, int], *, pinned: Iterable[PlanEntry] = (),
                            background: Mapping[VarKey, float] | None = None,
                            config: SchedulerConfig = SchedulerConfig(), epoch: int = 0,
                            detail: Callable[[TaskTemplate], TaskTemplate] | None = None) -> Plan:
    """Schedule ``instances`` greedily in priority order around ``pinned`` entries."""
    t0, th = window
    if th < t0:
        raise WindowError(f"window end {th} before start {t0}")
    if t0 < snapshot.time:
        raise WindowError("window starts before the snapshot time")
    background = dict(background or {})
    pinned = list(pinned)
    longest = max([i.template.duration for i in instances] + [1])
    grid = _Grid(snapshot, th, background, pad=longest + 2)
    for e in pinned:
        grid.add(e)
    pending = sorted(instances, key=lambda i: (-i.priority, i.id))
    rejected: list[str] = []
    for _ in range(max(1, len(pending))):
        placed_any = False
        still: list[TaskInstance] = []
        budget = config.max_inner_factor * max(1, len(pending))
        for n_tried, inst in enumerate(pending):
            if n_tried >= budget:
                still.append(inst)
                continue
            t = detail(inst.template) if detail else inst.template
            iv = find_valid_interval(t, grid, (t0, th), config)
            if iv is None:
                still.append(inst)
                continue
            s, e = iv
            _place(grid, inst, t, s, e, snapshot)
            placed_any = True
        pending = still
        if not placed_any or not pending:
            break
    rejected = [i.id for i in pending]
    return Plan(epoch, (t0, th), snapshot.time, dict(grid.entries), rejected,
                dict(snapshot.values), background)


def _place(grid: _Grid, inst: TaskInstance, t: TaskTemplate, s: int, e: int,
           snap: StateSnapshot) -> None:
    cons = tuple(_resolve_constraint(c, snap) for c in t.state_constraints())
    grid.add(PlanEntry(inst.id, t, snap.resolve(t.executor), s, e, Status.SCHEDULED,
                       inst.parent, _scheduled_impacts(t, snap, s, e), cons,
                       _occupancy(t, snap)))
    for sub in t.subtasks:
        sid = _subtask_id(inst.id, t, sub)
        grid.add(PlanEntry(sid, sub, snap.resolve(sub.executor), s, e, Status.SCHEDULED,
                           inst.id))


# ---------------------------------------------------------------------------
# Leader-side planner loop


@dataclass
class TickResult:
    triggers: list[ReplanTrigger] = field(default_factory=list)
    commits: list[CommitTask] = field(default_factory=list)
    removed: list[str] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)

    @property
    def noop(self) -> bool:
        return not (self.triggers or self.commits or self.removed or self.dropped)


_RANK = {Status.UNSCHEDULED: 0, Status.SCHEDULED: 1, Status.COMMITTED: 2,
         Status.EXECUTING: 3}


class Planner:
    """The strategic planner run by the active leader.

    Holds the task instances of the current wake window, the current plan,
    and the commit bookkeeping.  Committed and executing tasks are never
    unscheduled; everything else is rebuilt by :meth:`replan`.
    """

    def __init__(self, network: TaskNetwork, window: tuple[int, int],
                 background: Mapping[VarKey, float] | None = None,
                 config: SchedulerConfig = SchedulerConfig(),
                 instances: Iterable[TaskInstance] | None = None):
        self.network = network
        self.window = window
        self.background = dict(background or {})
        self.config = config
        self.active = False
        self.epoch = -1
        self.leader: str | None = None
        self.plan: Plan | None = None
        self.instances: dict[str, TaskInstance] = {}
        for inst in instances or ():
            self.instances[inst.id] = inst
        self.commit_log: list[tuple[int, str, int]] = []
        self._overrun_flagged: dict[str, int] = {}

    # lifecycle ------------------------------------------------------------

    def activate(self, epoch: int, leader: str) -> None:
        self.active, self.epoch, self.leader = True, epoch, leader

    def deactivate(self) -> None:
        self.active = False
        self.plan = None

    def _require_active(self) -> None:
        if not self.active:
            raise InactivePlanner("planner is not active on this agent")

    # status bookkeeping -----------------------------------------------------

    def statuses(self) -> dict[str, Status]:
        return {i: inst.status for i, inst in self.instances.items()}

    def apply_report(self, rep: StatusReport) -> Status | None:
        """Fold a controller report into the instance table; returns the new status."""
        inst = self.instances.get(rep.task_id)
        if inst is None:
            return None
        new = Status(rep.status)
        if inst.status.terminal:
            return None
        if not new.terminal and _RANK.get(new, 0) <= _RANK.get(inst.status, 0):
            return None
        inst.status = new
        if rep.actual_start is not None:
            inst.actual_start = rep.actual_start
        if rep.actual_end is not None:
            inst.actual_end = rep.actual_end
        return new

    def _children(self, parent_id: str) -> list[TaskInstance]:
        return [i for i in self.instances.values() if i.parent == parent_id]

    def _roll_up(self, parent: TaskInstance, now: int) -> Status | None:
        """Parent container status follows its subtasks."""
        kids = self._children(parent.id)
        if not kids or parent.status.terminal:
            return None
        sts = [k.status for k in kids]
        if all(s.terminal for s in sts):
            if all(s is Status.COMPLETED for s in sts):
                parent.status = Status.COMPLETED
            elif all(s is Status.DROPPED for s in sts):
                parent.status = Status.DROPPED
            elif any(s is Status.FAILED for s in sts):
                parent.status = Status.FAILED
            else:
                parent.status = Status.ABORTED
            parent.actual_end = now
            return parent.status
        if any(s is Status.EXECUTING for s in sts) and parent.status is Status.COMMITTED:
            parent.status = Status.EXECUTING
            parent.actual_start = min(k.actual_start for k in kids
                                      if k.actual_start is not None)
        return None

    def drop_unreachable(self, values: Mapping[VarKey, float]) -> list[str]:
        """Drop tasks whose precedence can no longer be met, to a fixpoint.

        A precedence is unreachable when it is not waived and every related
        predecessor instance has terminated with a status it does not accept.
        """
        dropped: list[str] = []
        changed = True
        while changed:
            changed = False
            for iid in sorted(self.instances):
                inst = self.instances[iid]
                if inst.parent is not None or inst.status not in (Status.UNSCHEDULED,
                                                                  Status.SCHEDULED):
                    continue
                if any(self._unreachable(c, values) for c in inst.template.precedences()):
                    inst.status = Status.DROPPED
                    dropped.append(iid)
                    changed = True
        return dropped

    def _unreachable(self, c: Constraint, values: Mapping[VarKey, float]) -> bool:
        if c.waive_if is not None:
            var, val = c.waive_if
            owner = self.leader if var[0] == LEADER else var[0]
            v = values.get((owner, var[1]))
            if v is not None and abs(v - val) <= TOL:
                return False
        related = [i for i in self.instances.values() if template_of(i.id) in c.predecessors]
        return bool(related) and all(i.status.terminal and i.status not in c.finished
                                     for i in related)

    # planning --------------------------------------------------------------

    def replan(self, trigger: ReplanTrigger, snapshot: StateSnapshot) -> Plan:
        """Unschedule everything not yet committed and rerun insertion."""
        self._require_active()
        self.drop_unreachable(snapshot.values)
        snapshot = replace(snapshot, statuses=self.statuses(), leader=self.leader)
        pinned, todo = [], []
        for inst in self.instances.values():
            if inst.status in (Status.COMMITTED, Status.EXECUTING):
                pinned.append(pin_instance(inst, snapshot, self.config))
            elif inst.status is Status.SCHEDULED:
                inst.transition(Status.UNSCHEDULED)
                todo.append(inst)
            elif inst.status is Status.UNSCHEDULED and inst.parent is None:
                todo.append(inst)
        todo = [i for i in todo if i.parent is None]
        t0 = max(self.window[0], snapshot.time)
        th = max(self.window[1], t0)
        plan = plan_priority_insertion(todo, snapshot, (t0, th), pinned=pinned,
                                       background=self.background, config=self.config,
                                       epoch=self.epoch)
        for e in plan.entries.values():
            if e.status is not Status.SCHEDULED:
                continue
            inst = self.instances.get(e.id)
            if inst is None:
                inst = TaskInstance(e.template, 0, parent=e.parent)
                self.instances[e.id] = inst
            if inst.status is Status.UNSCHEDULED:
                inst.transition(Status.SCHEDULED)
            inst.scheduled_start, inst.scheduled_end = e.start, e.end
        self.plan = plan
        return plan

    def tick(self, reports: Iterable[StatusReport], now: int,
             observations: Mapping[VarKey, tuple[float, float]] | None = None,
             ready: Iterable[str] | None = None) -> TickResult:
        """One 1 Hz evaluation: fold reports, detect triggers, commit due tasks.

        ``ready`` restricts commits to agents that acknowledged this leader.
        A committed task with no report ``response_timeout`` seconds after its
        start is dropped (its commit or every report was lost).
        """
        self._require_active()
        out = TickResult()
        plan = self.plan
        parents_touched = set()
        for rep in reports:
            new = self.apply_report(rep)
            if new is None:
                continue
            inst = self.instances[rep.task_id]
            if inst.parent:
                parents_touched.add(inst.parent)
            if new in (Status.FAILED, Status.ABORTED, Status.DROPPED):
                out.triggers.append(ReplanTrigger(ReplanKind.FAILURE, rep.task_id, now))
            elif new is Status.COMPLETED:
                if rep.reason == "milestone":
                    out.triggers.append(ReplanTrigger(ReplanKind.MILESTONE, rep.task_id, now))
                elif inst.scheduled_end is not None and rep.actual_end is not None \
                        and rep.actual_end < inst.scheduled_end - 1:
                    out.triggers.append(ReplanTrigger(ReplanKind.MILESTONE, rep.task_id, now))
        for iid in sorted(self.instances):
            inst = self.instances[iid]
            if inst.status is Status.COMMITTED and not inst.template.subtasks \
                    and inst.scheduled_start is not None \
                    and now > inst.scheduled_start + self.config.response_timeout:
                inst.status = Status.DROPPED
                out.dropped.append(iid)
                out.triggers.append(ReplanTrigger(ReplanKind.FAILURE, iid, now))
                if inst.parent:
                    parents_touched.add(inst.parent)
        for pid in sorted(parents_touched):
            parent = self.instances.get(pid)
            if parent is not None:
                self._roll_up(parent, now)
        if plan is None:
            return out
        for eid in [e.id for e in plan.entries.values()
                    if self.instances.get(e.id) and self.instances[e.id].status.terminal]:
            del plan.entries[eid]
            out.removed.append(eid)
        for e in plan.scheduled():
            inst = self.instances.get(e.id)
            if inst is None or inst.status is not Status.EXECUTING or e.parent:
                continue
            if now >= e.end + self.config.overrun_grace and self._overrun_flagged.get(e.id) != e.end:
                self._overrun_flagged[e.id] = e.end
                out.triggers.append(ReplanTrigger(ReplanKind.CONFLICT, e.id, now))
        if observations:
            out.triggers += self._divergence(observations, now)
        if not out.triggers:
            out.commits = self.commit_due_tasks(now, ready)
            for e in plan.scheduled():
                inst = self.instances.get(e.id)
                if inst is not None and inst.status is Status.SCHEDULED and e.start < now:
                    out.triggers.append(ReplanTrigger(ReplanKind.COMMIT_PASS, e.id, now))
                    break
        return out

    def _divergence(self, observations: Mapping[VarKey, tuple[float, float]],
                    now: int) -> list[ReplanTrigger]:
        plan = self.plan
        for var, (value, at) in sorted(observations.items()):
            if not plan.now <= at <= plan.window[1]:
                continue
            if var not in plan.seeds:
                # The plan was made without this agent's state; now it is known.
                return [ReplanTrigger(ReplanKind.CONFLICT, f"{var[0]}.{var[1]}", now)]
            predicted = plan.timeline(var).value_at(at)
            if abs(predicted - value) > self.config.divergence:
                return [ReplanTrigger(ReplanKind.CONFLICT, f"{var[0]}.{var[1]}", now)]
        return []

    def _predecessors_ready(self, e: PlanEntry) -> bool:
        """Cross-agent predecessors must have finished; same-agent ones be handed off."""
        executors = {a for a, _ in e.occupies} or {e.executor}
        for c in e.template.precedences():
            preds = set(c.predecessors)
            related = [i for i in self.instances.values() if template_of(i.id) in preds]
            if any(i.status in c.finished for i in related):
                continue
            if c.waive_if is not None and self._waived(c):
                continue
            ok = False
            for i in related:
                ex = self.leader if i.template.executor == LEADER else i.template.executor
                same = ex in executors and not i.template.subtasks
                if same and i.status in (Status.COMMITTED, Status.EXECUTING):
                    ok = True
            if not ok:
                return False
        return True

    def _waived(self, c: Constraint) -> bool:
        if self.plan is None:
            return False
        var, val = c.waive_if
        owner = self.leader if var[0] == LEADER else var[0]
        v = self.plan.seeds.get((owner, var[1]))
        return v is not None and abs(v - val) <= TOL

    def commit_due_tasks(self, now: int, ready: Iterable[str] | None = None
                         ) -> list[CommitTask]:
        """Hand off every scheduled task whose start falls in ``[now, now + window]``."""
        self._require_active()
        out: list[CommitTask] = []
        if self.plan is None:
            return out
        ready = None if ready is None else set(ready)
        for e in self.plan.scheduled():
            inst = self.instances.get(e.id)
            if inst is None or inst.status is not Status.SCHEDULED or e.parent:
                continue
            if not now <= e.start <= now + self.config.commit_window:
                continue
            if not self._predecessors_ready(e):
                continue
            if ready is not None and not {a for a, _ in e.occupies} <= ready:
                continue
            inst.transition(Status.COMMITTED)
            e.status = Status.COMMITTED
            if e.template.subtasks:
                for k in self._children(e.id):
                    k.transition(Status.COMMITTED)
                    self.plan.entries[k.id].status = Status.COMMITTED
                    out.append(self._commit_msg(k, self.plan.entries[k.id], now))
            else:
                out.append(self._commit_msg(inst, e, now))
        return out

    def _commit_msg(self, inst: TaskInstance, e: PlanEntry, now: int) -> CommitTask:
        self.commit_log.append((now, inst.id, e.start))
        return CommitTask(inst.id, inst.template.id, e.executor, e.start, e.end,
                          self.epoch, now)
