"""Per-agent executive: runs committed tasks under local constraint checks."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol

from .messages import CommitTask, LeaderAck, LeaderAnnouncement, StatusReport
from .scheduler import modes_conflict
from .tasknet.model import LEADER, Constraint, Locus, Scope, Status, TaskNetwork, TaskTemplate, VarKey


class Progress(str, enum.Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class TaskRunner(Protocol):
    """What the controller needs from whatever actually performs commands."""

    def ready(self, task_id: str, template: TaskTemplate, now: float) -> bool: ...

    def start(self, task_id: str, template: TaskTemplate, duration: float, now: float) -> None: ...

    def poll(self, task_id: str, now: float) -> tuple[Progress, str]: ...

    def cleanup(self, task_id: str, command: str, now: float) -> None: ...

    def stop(self, task_id: str, now: float) -> None: ...


class NullRunner:
    """Completes every task after its planned duration."""

    def __init__(self):
        self._due: dict[str, float] = {}

    def ready(self, task_id, template, now):
        return True

    def start(self, task_id, template, duration, now):
        self._due[task_id] = now + duration

    def poll(self, task_id, now):
        if now >= self._due[task_id]:
            return Progress.COMPLETED, ""
        return Progress.RUNNING, ""

    def cleanup(self, task_id, command, now):
        pass

    def stop(self, task_id, now):
        self._due.pop(task_id, None)


@dataclass(frozen=True)
class ControllerConfig:
    max_delay: float = 30.0
    report_period: float = 5.0
    resend_terminal: float = 30.0


@dataclass
class TrackedTask:
    commit: CommitTask
    template: TaskTemplate
    status: Status = Status.COMMITTED
    actual_start: float | None = None
    actual_end: float | None = None
    max_delay: float = 30.0
    reason: str = ""
    cleanup_issued: bool = False
    finished_at: float | None = None

    @property
    def id(self) -> str:
        return self.commit.task_id


@dataclass
class ControllerOutput:
    reports: list[StatusReport] = field(default_factory=list)
    ack: LeaderAck | None = None
    events: list[tuple[str, str, str]] = field(default_factory=list)


class Controller:
    """Agent controller.

    ``state`` arguments map variable keys to live local values (own
    resources, the wake-relative clock and team flags from the local store).
    Only local-locus constraints are evaluated here.
    """

    def __init__(self, agent: str, network: TaskNetwork, runner: TaskRunner | None = None,
                 config: ControllerConfig = ControllerConfig()):
        self.agent = agent
        self.network = network
        self.runner = runner or NullRunner()
        self.config = config
        self.leader: str | None = None
        self.epoch = -1
        self.ready = True
        self.tracked: dict[str, TrackedTask] = {}
        self.finished: dict[str, TrackedTask] = {}
        self._last_full_report = -1e9
        self._ack_pending = False
        self.executions: list[tuple[str, float, float | None, Status]] = []

    # helpers ---------------------------------------------------------------

    def _resolve(self, c: Constraint) -> Constraint:
        if c.is_state and c.variable[0] == LEADER:
            return c.with_variable((self.agent, c.variable[1]))
        return c

    def local_constraints(self, t: TaskTemplate, scope: Scope) -> list[Constraint]:
        return [self._resolve(c) for c in t.state_constraints(scope) if c.locus is Locus.LOCAL]

    def violated(self, t: TaskTemplate, scope: Scope, state: Mapping[VarKey, float]
                 ) -> Constraint | None:
        for c in self.local_constraints(t, scope):
            v = state.get(c.variable)
            if v is not None and not c.admits(v):
                return c
        return None

    def _report(self, task: TrackedTask, now: float, reason: str = "") -> StatusReport:
        return StatusReport(task.id, self.agent, task.status.value, now, task.commit.epoch,
                            reason or task.reason, task.actual_start, task.actual_end)

    def running(self) -> list[TrackedTask]:
        return [t for t in self.tracked.values() if t.status is Status.EXECUTING]

    def mode(self) -> str:
        modes = [t.template.mode for t in self.running()]
        if not modes:
            return "idle"
        order = ["driving", "planning", "sync", "low-power", "idle"]
        return min(modes, key=order.index)

    def _finish(self, task: TrackedTask, status: Status, now: float, reason: str) -> None:
        task.status = status
        task.reason = reason
        task.finished_at = now
        if task.actual_start is not None:
            task.actual_end = now
        self.tracked.pop(task.id, None)
        self.finished[task.id] = task
        if task.actual_start is not None:
            self.executions.append((task.id, task.actual_start, task.actual_end, status))

    def _run_cleanup(self, task: TrackedTask, now: float, out: ControllerOutput) -> None:
        cmd = task.template.cleanup
        if cmd and not task.cleanup_issued:
            task.cleanup_issued = True
            self.runner.cleanup(task.id, cmd, now)
            out.events.append(("cleanup", task.id, cmd))
        self.runner.stop(task.id, now)

    # commits ---------------------------------------------------------------

    def receive_commit(self, msg: CommitTask, now: float) -> ControllerOutput:
        out = ControllerOutput()
        if msg.epoch != self.epoch or not self.ready:
            rep = StatusReport(msg.task_id, self.agent, Status.DROPPED.value, now, msg.epoch,
                               "stale-epoch" if msg.epoch != self.epoch else "not-ready")
            out.reports.append(rep)
            return out
        if msg.task_id in self.tracked:
            return out
        if msg.task_id in self.finished:
            out.reports.append(self._report(self.finished[msg.task_id], now))
            return out
        t = self.network.template(msg.template_id)
        slack = self.config.max_delay
        later = [x.commit.start for x in self.tracked.values() if x.commit.start >= msg.end]
        if later:
            slack = min(slack, max(0.0, min(later) - msg.end))
        task = TrackedTask(msg, t, max_delay=slack)
        self.tracked[msg.task_id] = task
        out.events.append(("accepted", msg.task_id, ""))
        return out

    # tick ------------------------------------------------------------------

    def tick(self, state: Mapping[VarKey, float], now: float) -> ControllerOutput:
        out = ControllerOutput()
        changed: list[TrackedTask] = []
        for task in sorted(self.running(), key=lambda t: t.id):
            bad = self.violated(task.template, Scope.MAINTENANCE, state)
            if bad is not None:
                self._run_cleanup(task, now, out)
                self._finish(task, Status.FAILED, now,
                             f"maintenance:{bad.variable[0]}.{bad.variable[1]}")
                changed.append(task)
                continue
            progress, reason = self.runner.poll(task.id, now)
            if progress is Progress.COMPLETED:
                self._finish(task, Status.COMPLETED, now, reason)
                changed.append(task)
            elif progress is Progress.FAILED:
                self._run_cleanup(task, now, out)
                self._finish(task, Status.FAILED, now, reason or "command-failed")
                changed.append(task)
        for task in sorted(self.tracked.values(), key=lambda t: (t.commit.start, t.id)):
            if task.status is not Status.COMMITTED or now < task.commit.start:
                continue
            late = now - task.commit.start
            blocked = (self.violated(task.template, Scope.PRE, state)
                       or self.violated(task.template, Scope.MAINTENANCE, state))
            busy = any(modes_conflict(r.template.mode, task.template.mode)
                       for r in self.running())
            ready = self.runner.ready(task.id, task.template, now)
            if blocked is None and not busy and ready:
                task.status = Status.EXECUTING
                task.actual_start = now
                self.runner.start(task.id, task.template,
                                  task.commit.end - task.commit.start, now)
                changed.append(task)
            elif late >= task.max_delay:
                why = (f"pre:{blocked.variable[0]}.{blocked.variable[1]}" if blocked
                       else "executor-busy" if busy else "not-ready")
                self._finish(task, Status.FAILED, now, why)
                changed.append(task)
        for task in changed:
            out.reports.append(self._report(task, now))
        if now - self._last_full_report >= self.config.report_period:
            self._last_full_report = now
            seen = {r.task_id for r in out.reports}
            for task in sorted(self.tracked.values(), key=lambda t: t.id):
                if task.id not in seen:
                    out.reports.append(self._report(task, now))
            # Terminal reports are repeated for a while in case the first copy was lost.
            for task in sorted(self.finished.values(), key=lambda t: t.id):
                if task.id not in seen and now - task.finished_at <= self.config.resend_terminal:
                    out.reports.append(self._report(task, now))
        if self._ack_pending and not self.running():
            self._ack_pending = False
            self.ready = True
            out.ack = LeaderAck(self.agent, self.epoch)
        return out

    # aborts ------------------------------------------------------------------

    def handle_abort(self, task_id: str, now: float) -> ControllerOutput:
        out = ControllerOutput()
        task = self.tracked.get(task_id)
        if task is None:
            done = self.finished.get(task_id)
            status = done.status.value if done else "unknown"
            out.reports.append(StatusReport(task_id, self.agent, status, now, self.epoch,
                                            "abort-ignored", done and done.actual_start,
                                            done and done.actual_end))
            return out
        if task.status is Status.EXECUTING:
            self._run_cleanup(task, now, out)
            self._finish(task, Status.ABORTED, now, "abort")
        else:
            self._finish(task, Status.DROPPED, now, "abort")
        out.reports.append(self._report(task, now))
        return out

    # leadership --------------------------------------------------------------

    def handle_leader_change(self, ann: LeaderAnnouncement, now: float) -> ControllerOutput:
        out = ControllerOutput()
        if ann.epoch < self.epoch:
            return out
        if ann.epoch == self.epoch and ann.leader == self.leader:
            return out
        self.leader, self.epoch = ann.leader, ann.epoch
        for task in sorted(self.tracked.values(), key=lambda t: t.id):
            if task.status is Status.COMMITTED:
                self._finish(task, Status.DROPPED, now, "leader-change")
                out.reports.append(self._report(task, now))
            elif task.status is Status.EXECUTING and task.template.cleanup:
                self._run_cleanup(task, now, out)
                self._finish(task, Status.ABORTED, now, "leader-change")
                out.reports.append(self._report(task, now))
        if self.running():
            self.ready = False
            self._ack_pending = True
        else:
            self.ready = True
            self._ack_pending = False
            out.ack = LeaderAck(self.agent, self.epoch)
        return out

    def reset(self) -> None:
        """Power cycle: all volatile execution state is lost."""
        for task in list(self.tracked.values()):
            self.runner.stop(task.id, 0.0)
        self.tracked.clear()
        self.finished.clear()
        self.leader, self.epoch, self.ready = None, -1, True
        self._ack_pending = False
