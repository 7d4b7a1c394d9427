"""Leader-side checking of multi-agent constraints and abort emission."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .messages import AbortTask
from .scheduler import PlanEntry
from .tasknet.model import Constraint, Locus, Scope, Status, VarKey

GRACE = 5.0


class Phase(str, enum.Enum):
    PENDING = "pre-check-pending"
    MAINTAINING = "maintaining"
    ABORTING = "aborting"
    CLOSED = "closed"


@dataclass
class MultiAgentWatch:
    task_id: str
    executor: str
    constraint: Constraint
    start: float
    end: float
    group: str
    phase: Phase = Phase.PENDING
    grace_deadline: float = 0.0

    @property
    def maintenance(self) -> bool:
        return self.constraint.scope is Scope.MAINTENANCE


@dataclass
class Coordinator:
    """Tracks watches for committed tasks bound by multi-agent constraints.

    A watch starts in the pending phase and must see its constraint hold at
    least once within the grace window after the task's start.  Maintenance
    watches then keep checking every tick.  Any failure sends an abort for
    every task in the same group (the parent's subtasks) that is not known
    to have terminated; aborts repeat each tick until a terminal status for
    that task arrives.
    """

    grace: float = GRACE
    aborts_enabled: bool = True
    watches: list[MultiAgentWatch] = field(default_factory=list)
    aborted_groups: dict[str, float] = field(default_factory=dict)
    log: list[tuple[float, str, str]] = field(default_factory=list)

    def register(self, entries: Iterable[PlanEntry],
                 children: Mapping[str, list[PlanEntry]]) -> list[MultiAgentWatch]:
        """Add watches for newly committed tasks; returns the new ones."""
        known = {(w.task_id, w.constraint) for w in self.watches}
        new: list[MultiAgentWatch] = []
        for e in entries:
            subs = children.get(e.id) or [e]
            for c in e.constraints:
                if c.locus is not Locus.MULTI:
                    continue
                if c.scope is Scope.MAINTENANCE:
                    bound = [s for s in subs if c in s.template.constraints] or subs
                else:
                    bound = [e]
                for s in bound:
                    if (s.id, c) in known:
                        continue
                    new.append(MultiAgentWatch(s.id, s.executor, c, s.start, s.end, e.id,
                                               grace_deadline=s.start + self.grace))
                    known.add((s.id, c))
        self.watches += new
        return new

    def evaluate(self, view: Mapping[VarKey, float], statuses: Mapping[str, Status],
                 now: float, executors: Mapping[str, str]) -> list[tuple[str, AbortTask]]:
        """One tick.  Returns ``(recipient, AbortTask)`` pairs."""
        failing_groups: set[str] = set()
        for w in self.watches:
            st = statuses.get(w.task_id)
            if w.phase is Phase.CLOSED:
                continue
            if st is not None and st.terminal:
                w.phase = Phase.CLOSED
                continue
            if w.phase is Phase.ABORTING or now < w.start:
                continue
            v = view.get(w.constraint.variable)
            holds = v is not None and w.constraint.admits(v)
            if w.phase is Phase.PENDING:
                if holds:
                    w.phase = Phase.MAINTAINING if w.maintenance else Phase.CLOSED
                elif now >= w.grace_deadline:
                    failing_groups.add(w.group)
                    self.log.append((now, w.task_id, "pre-check-failed"))
            elif w.phase is Phase.MAINTAINING and not holds:
                failing_groups.add(w.group)
                self.log.append((now, w.task_id, "maintenance-violated"))
        for g in sorted(failing_groups):
            self.aborted_groups.setdefault(g, now)
            for w in self.watches:
                if w.group == g and w.phase is not Phase.CLOSED:
                    w.phase = Phase.ABORTING
        out: list[tuple[str, AbortTask]] = []
        if not self.aborts_enabled:
            return out
        targets: dict[str, str] = {}
        for g in sorted(self.aborted_groups):
            for tid, ex in executors.items():
                if self._in_group(tid, g):
                    st = statuses.get(tid)
                    if st is None or not st.terminal:
                        targets[tid] = ex
        for tid in sorted(targets):
            out.append((targets[tid], AbortTask(tid)))
            self.log.append((now, tid, "abort-sent"))
        return out

    def _in_group(self, task_id: str, group: str) -> bool:
        return any(w.task_id == task_id and w.group == group for w in self.watches)

    def clear(self) -> None:
        self.watches.clear()
        self.aborted_groups.clear()
