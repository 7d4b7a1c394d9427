"""Scenario layer: wake/sleep timer, drive progress models, fault injection
and the end-to-end simulation that wires every component together.

Absolute simulation time drives the event loop, the election and the store
versions.  Task times seen by the planner and controllers are relative to
the start of the current wake window.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .controller import Controller, ControllerConfig, ControllerOutput, Progress
from .coordination import Coordinator
from .election import ElectionConfig, ElectionAck, ElectionNode, ElectionWire, margin_score
from .messages import (
    AbortTask,
    CommitTask,
    Heartbeat,
    LeaderAck,
    LeaderAnnouncement,
    Reliable,
    ReliableAck,
    SnapshotRequest,
    StatusReport,
    SyncAck,
    SyncRecords,
)
from .netsim import Envelope, LinkModel, ReliableChannel, Simulator, full_mesh
from .resources import EnvironmentModel, background_rates, soc_rate, temp_rate
from .scheduler import (
    Planner,
    ReplanKind,
    ReplanTrigger,
    SchedulerConfig,
    StateSnapshot,
    template_of,
)
from .ssdb import SYNC_PERIOD, SharedStore, SyncEndpoint
from .tasknet import (
    LEADER,
    TEAM,
    NetworkConfig,
    Scope,
    Status,
    TaskNetwork,
    TaskTemplate,
    VarKind,
    build_exploration_network,
    build_formation_network,
    expand_instances,
)

BEHAVIORS = ("nominal", "starts-late", "runs-late", "ends-early", "fails")
TASK_KINDS = ("sync", "backup", "planning", "formation", "exploration", "stop", "sleep")
DRIVE_COMMANDS = ("drive_explore", "drive_formation")
_CYCLE = re.compile(r"\.c(\d+)(?:[./#]|$)")


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Wake cycle


@dataclass(frozen=True)
class WakeCycle:
    """Hardware timer: wake at minutes 0 and 30, shut down 25 minutes later."""

    period: float = 1800.0
    active: float = 1500.0

    def __post_init__(self):
        if not 0 < self.active <= self.period:
            raise ValueError("active span must be positive and fit in the period")

    def window_start(self, index: int) -> float:
        return index * self.period

    def shutdown_time(self, index: int) -> float:
        return index * self.period + self.active

    def window_of(self, t: float) -> int | None:
        """Index of the window containing ``t`` (wake inclusive, shutdown exclusive)."""
        idx = int(math.floor(t / self.period))
        return idx if t - idx * self.period < self.active else None

    def events(self, windows: int) -> list[tuple[float, str, int]]:
        out = []
        for i in range(windows):
            out += [(self.window_start(i), "wake", i), (self.shutdown_time(i), "shutdown", i)]
        return out


# ---------------------------------------------------------------------------
# Drive models


@dataclass
class DriveModel:
    """Abstract drive progress; exploration tracks area left in a sub-region."""

    mode: str
    rate: float
    progress: float = 0.0
    region_remaining: float = 0.0
    region_size: float = 0.0
    corridor_ok: bool = True
    milestone_fired: bool = False

    def __post_init__(self):
        if self.mode not in ("explore", "formation"):
            raise ValueError(f"unknown drive mode {self.mode!r}")
        if self.rate < 0:
            raise ValueError("rate must be non-negative")
        if self.mode == "explore" and self.region_size == 0.0:
            self.region_size = self.region_remaining

    def step(self, dt: float, violate_corridor: bool = False) -> list[str]:
        """Advance ``dt`` seconds; returns the events raised."""
        events: list[str] = []
        if violate_corridor and self.corridor_ok:
            self.corridor_ok = False
            events.append("corridor-violation")
            return events
        if self.mode == "explore":
            if self.region_remaining <= 0:
                return events
            self.region_remaining = max(0.0, self.region_remaining - self.rate * dt)
            self.progress = 1.0 - self.region_remaining / self.region_size if self.region_size else 1.0
            if self.region_remaining <= 1e-9 and not self.milestone_fired:
                self.milestone_fired = True
                events.append("milestone")
        else:
            self.progress = min(1.0, self.progress + self.rate * dt)
        return events


# ---------------------------------------------------------------------------
# Fault scripts


@dataclass(frozen=True)
class FaultSpec:
    """Selects task instances by kind (and optionally agent, cycle, window)."""

    kind: str
    behavior: str
    amount: float = 0.0
    agent: str | None = None
    cycle: int | None = None
    window: int | None = 0

    def __post_init__(self):
        if self.behavior not in BEHAVIORS:
            raise ScenarioError(f"unknown behavior {self.behavior!r}")
        if self.kind not in TASK_KINDS:
            raise ScenarioError(f"unknown task kind {self.kind!r}")
        if self.amount < 0:
            raise ScenarioError("fault amount must be non-negative")

    def matches(self, task_id: str, template: TaskTemplate, agent: str, window: int) -> bool:
        if template.kind != self.kind:
            return False
        if self.agent is not None and agent != self.agent:
            return False
        if self.window is not None and window != self.window:
            return False
        if self.cycle is not None:
            m = _CYCLE.search(task_id)
            if m is None or int(m.group(1)) != self.cycle:
                return False
        return True

    def label(self) -> str:
        if self.behavior == "nominal":
            return "nominal"
        return f"{self.behavior}({self.amount:g})"


@dataclass
class FaultScript:
    faults: list[FaultSpec] = field(default_factory=list)
    applied: list[tuple[int, str, str, FaultSpec]] = field(default_factory=list)

    def claim(self, task_id: str, template: TaskTemplate, agent: str,
              window: int) -> FaultSpec | None:
        """Behavior for this instance; each instance is matched at most once."""
        for spec in self.faults:
            if spec.matches(task_id, template, agent, window):
                key = (window, agent, task_id)
                if not any(a[:3] == key and a[3] == spec for a in self.applied):
                    self.applied.append((*key, spec))
                return spec
        return None

    def unmatched(self) -> list[FaultSpec]:
        used = {a[3] for a in self.applied}
        return [f for f in self.faults if f not in used]


# ---------------------------------------------------------------------------
# Scenario


@dataclass
class AgentSpec:
    id: str
    role: str = "rover"
    soc: float = 80.0
    temp: float = 30.0
    participating: bool = True
    eligible: bool = True  # may be chosen as leader


@dataclass
class Scenario:
    name: str = "scenario"
    mission: str = "exploration"
    agents: list[AgentSpec] = field(default_factory=list)
    latency: float = 0.2
    jitter: float = 0.05
    drop: float = 0.0
    link_overrides: list[dict] = field(default_factory=list)
    mutes: list[dict] = field(default_factory=list)
    environment: EnvironmentModel = field(default_factory=EnvironmentModel)
    windows: int = 1
    cycles: int = 3
    region: float = 1700.0
    explore_rate: float | None = None
    formation_goal: int = 2
    faults: list[FaultSpec] = field(default_factory=list)
    kills: list[dict] = field(default_factory=list)
    perturbations: list[dict] = field(default_factory=list)
    seed: int = 0
    duration: float | None = None
    aborts_enabled: bool = True
    metadata: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.mission not in ("exploration", "formation"):
            raise ScenarioError(f"unknown mission {self.mission!r}")
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ScenarioError("duplicate agent ids")
        if sum(a.role == "base-station" for a in self.agents) != 1:
            raise ScenarioError("exactly one base station is required")
        if not any(a.role == "rover" for a in self.agents):
            raise ScenarioError("at least one rover is required")
        for a in self.agents:
            if a.role not in ("rover", "base-station"):
                raise ScenarioError(f"unknown role {a.role!r}")
        if self.windows < 1 or self.cycles < 1:
            raise ScenarioError("windows and cycles must be >= 1")
        known = set(ids)
        for k in self.kills:
            if k.get("agent") not in known:
                raise ScenarioError(f"kill names unknown agent {k.get('agent')!r}")
        for m in self.mutes:
            if m.get("agent") not in known:
                raise ScenarioError(f"mute names unknown agent {m.get('agent')!r}")
        for p in self.perturbations:
            if p.get("agent") not in known or p.get("variable") not in ("soc", "cpu_temp"):
                raise ScenarioError(f"bad perturbation {p}")
        problems = self.environment.validate()
        if problems:
            raise ScenarioError("environment: " + "; ".join(problems))

    @property
    def scripted(self) -> bool:
        """True when the scenario injects any fault or disturbance."""
        return bool([f for f in self.faults if f.behavior != "nominal"] or self.kills
                    or self.perturbations or self.mutes or self.drop > 0
                    or any(o.get("blackouts") or o.get("drop") for o in self.link_overrides))

    @property
    def roles(self) -> dict[str, str]:
        return {a.id: a.role for a in self.agents}

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("environment", "faults", "agents")}
        d["agents"] = [asdict(a) for a in self.agents]
        d["faults"] = [asdict(f) for f in self.faults]
        d["environment"] = self.environment.to_text()
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: Path | None = None) -> Scenario:
        data = dict(data)
        try:
            agents = [AgentSpec(**a) for a in data.pop("agents", [])]
            faults = [FaultSpec(**f) for f in data.pop("faults", [])]
            env_text = data.pop("environment", None)
            env_file = data.pop("environment_file", None)
            if env_file is not None:
                path = Path(env_file)
                if base_dir is not None and not path.is_absolute():
                    path = base_dir / path
                env_text = path.read_text()
            env = EnvironmentModel.from_text(env_text) if env_text else EnvironmentModel()
            scen = cls(agents=agents, faults=faults, environment=env, **data)
        except (TypeError, ValueError) as exc:
            raise ScenarioError(str(exc)) from None
        scen.validate()
        return scen

    @classmethod
    def load(cls, path: str | Path) -> Scenario:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(data, base_dir=path.parent)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def default_team(rovers: int = 3) -> list[AgentSpec]:
    return [AgentSpec("base", "base-station")] + [
        AgentSpec(f"rover{i + 1}") for i in range(rovers)]


# ---------------------------------------------------------------------------
# Task runner bound to an agent


@dataclass
class _Run:
    template: TaskTemplate
    started: float
    end: float
    fail_at: float | None
    drive: DriveModel | None
    last: float


class MissionRunner:
    """Executes commands for one agent, applying any scripted fault."""

    def __init__(self, agent: Agent):
        self.agent = agent
        self.runs: dict[str, _Run] = {}
        self.first_due: dict[str, float] = {}
        self.faults: dict[str, FaultSpec | None] = {}

    def _fault(self, task_id: str, template: TaskTemplate) -> FaultSpec | None:
        if task_id not in self.faults:
            spec = self.agent.mission.claim_fault(task_id, template, self.agent.id)
            self.faults[task_id] = spec
        return self.faults[task_id]

    def ready(self, task_id, template, now):
        first = self.first_due.setdefault(task_id, now)
        f = self._fault(task_id, template)
        if f is not None and f.behavior == "starts-late":
            return now >= first + f.amount
        return True

    def start(self, task_id, template, duration, now):
        f = self._fault(task_id, template)
        d, fail_at = float(duration), None
        if f is not None:
            if f.behavior == "runs-late":
                d += f.amount
            elif f.behavior == "ends-early":
                d = max(1.0, d - f.amount)
            elif f.behavior == "fails":
                fail_at = now + min(f.amount, d)
        drive = None
        if template.command == "drive_explore":
            drive = self.agent.explore
        elif template.command == "drive_formation":
            drive = DriveModel("formation", 1.0 / max(1.0, float(duration)))
        self.runs[task_id] = _Run(template, now, now + d, fail_at, drive, now)

    def poll(self, task_id, now):
        run = self.runs[task_id]
        if run.fail_at is not None and now >= run.fail_at:
            if run.drive is not None and run.drive.mode == "formation":
                run.drive.step(0.0, violate_corridor=True)
                return Progress.FAILED, "corridor-violation"
            return Progress.FAILED, "command-failed"
        if run.drive is not None:
            events = run.drive.step(now - run.last)
            run.last = now
            if "milestone" in events:
                self.agent.on_milestone(task_id)
                return Progress.COMPLETED, "milestone"
        if now >= run.end:
            return Progress.COMPLETED, ""
        return Progress.RUNNING, ""

    def cleanup(self, task_id, command, now):
        pass

    def stop(self, task_id, now):
        self.runs.pop(task_id, None)

    def reset(self) -> None:
        self.runs.clear()
        self.first_due.clear()
        self.faults.clear()


# ---------------------------------------------------------------------------
# Agent

# Control traffic that is retransmitted until acknowledged.  Aborts stay
# unsequenced: the coordinator repeats them until the sibling terminates.
RELIABLE_TYPES = (CommitTask, StatusReport, LeaderAck, SnapshotRequest)


class Agent:
    """One rover or base station: store, election, controller and (when
    leading) the planner and multi-agent coordinator."""

    def __init__(self, mission: Simulation, spec: AgentSpec):
        self.mission = mission
        self.spec = spec
        self.id = spec.id
        self.role = spec.role
        self.soc: float | None = spec.soc if spec.role == "rover" else None
        self.temp = spec.temp
        self.participating = 1.0 if spec.participating and spec.role == "rover" else 0.0
        self.store = SharedStore(self.id)
        self.sync = SyncEndpoint(self.store, self.send)
        self.runner = MissionRunner(self)
        self.controller = Controller(self.id, mission.network, self.runner, ControllerConfig())
        self.coordinator = Coordinator(aborts_enabled=mission.scenario.aborts_enabled)
        self.explore = DriveModel("explore", mission.explore_rate,
                                  region_remaining=mission.sub_region)
        self.election: ElectionNode | None = None
        self.channel: ReliableChannel | None = None
        self.planner: Planner | None = None
        self.ann: LeaderAnnouncement | None = None
        self.inbox: list[StatusReport] = []
        self.acks: set[str] = set()
        self.activating_until: float | None = None
        self.activation_deadline = 0.0
        self.awaiting_snapshot: set[str] = set()
        self.low_power = False
        self.awake = False
        self.dead = False
        self.last_physics = 0.0
        self._last_exec: dict[str, str] = {}
        self._last_leader: tuple | None = None
        self._coord_value: float | None = None

    # helpers ---------------------------------------------------------------

    @property
    def sim(self) -> Simulator:
        return self.mission.sim

    @property
    def active(self) -> bool:
        return self.awake and not self.dead

    def rel(self) -> float:
        return self.mission.rel(self.sim.now)

    def send(self, recipient: str, msg: object) -> None:
        if (self.channel is not None and recipient != self.id
                and isinstance(msg, RELIABLE_TYPES)):
            self.channel.send(recipient, msg, self.sim.now)
        else:
            self.mission.transmit(self.id, recipient, msg)

    def record(self, kind: str, payload: Any = None) -> None:
        self.sim.record(kind, self.id, payload)

    def mode(self) -> str:
        m = self.controller.mode()
        return "low-power" if m == "idle" and self.low_power else m

    def live_values(self) -> dict:
        vals = {(self.id, "cpu_temp"): self.temp}
        if self.soc is not None:
            vals[(self.id, "soc")] = self.soc
            vals[(self.id, "participating")] = self.participating
        return vals

    def publish_own_state(self) -> None:
        now = self.sim.now
        for key, v in sorted(self.live_values().items()):
            self.store.put_local(key, round(v, 6), now)

    # physics ---------------------------------------------------------------

    def integrate(self, now: float, mode: str | None = None) -> None:
        dt = now - self.last_physics
        self.last_physics = now
        if dt <= 0:
            return
        env = self.mission.env
        m = mode or self.mode()
        if self.soc is not None:
            self.soc = min(100.0, max(0.0, self.soc + soc_rate(env, m) * dt))
        self.temp += temp_rate(env, m) * dt

    # lifecycle -------------------------------------------------------------

    def wake(self, now: float) -> None:
        self.integrate(now, "low-power")
        self.awake = True
        self.low_power = False
        self.controller.reset()
        self.runner.reset()
        self._last_exec.clear()
        self._last_leader = None
        self.step_down()
        self.ann = None
        self.store.forget_acks()
        mission = self.mission
        self.channel = ReliableChannel(
            now, lambda peer, m: mission.transmit(self.id, peer, m),
            resend_after=mission.resend_after)
        peers = {p: mission.sim.link(self.id, p).weight for p in mission.sim.neighbors(self.id)}
        self.election = ElectionNode(
            self.id, peers, self.send, score=self.score, eligible=self.spec.eligible,
            config=mission.election_config, on_announce=self.on_leader,
            clock=lambda: mission.sim.now)
        self.publish_own_state()

    def power_down(self, cause: str) -> None:
        """FPGA shutdown or crash: record what was in flight, lose volatile state."""
        for task in sorted(self.controller.tracked.values(), key=lambda t: t.id):
            if task.status is Status.EXECUTING:
                self.record("interrupted", {"task": task.id, "cause": cause,
                                            "window": self.mission.window})
            else:
                self.record("exec", {"task": task.id, "status": Status.DROPPED.value,
                                     "reason": cause, "window": self.mission.window,
                                     "start": None, "end": None, "epoch": task.commit.epoch})
        self.controller.reset()
        self.runner.reset()
        self.step_down()
        self.election = None
        self.channel = None
        self.ann = None
        self.awake = False

    def score(self) -> float:
        return margin_score(self.soc, self.temp).score

    # leadership -----------------------------------------------------------

    def on_leader(self, ann: LeaderAnnouncement) -> None:
        key = (ann.leader, ann.epoch, ann.survivor)
        if key != self._last_leader:
            self._last_leader = key
            self.record("leader", {"leader": ann.leader, "epoch": ann.epoch,
                                   "survivor": ann.survivor, "round": ann.round,
                                   "window": self.mission.window})
        self.ann = ann
        self.handle_output(self.controller.handle_leader_change(ann, self.rel()))
        self.store.team_writer = ann.leader == self.id
        if ann.leader == self.id:
            if self.planner is None or self.planner.epoch != ann.epoch:
                self.become_leader(ann)
        elif self.planner is not None:
            self.step_down()

    def become_leader(self, ann: LeaderAnnouncement) -> None:
        m = self.mission
        self.planner = Planner(m.network, m.planning_window, m.background, m.scheduler_config,
                               expand_instances(m.network))
        self.planner.activate(ann.epoch, self.id)
        self.coordinator.clear()
        self.acks = set()
        self.inbox = []
        self._coord_value = None
        self.activating_until = self.sim.now + m.activation_delay
        self.activation_deadline = self.sim.now + m.activation_timeout
        self.awaiting_snapshot = {p for p in ann.members if p != self.id}
        self.record("activate", {"epoch": ann.epoch})
        for peer in ann.members:
            if peer != self.id:
                self.send(peer, SnapshotRequest(self.id, ann.epoch))

    def step_down(self) -> None:
        if self.planner is not None:
            self.planner.deactivate()
            self.record("deactivate", {"epoch": self.planner.epoch})
        self.planner = None
        self.activating_until = None
        self.store.team_writer = False
        self.coordinator.clear()

    # messages ---------------------------------------------------------------

    def on_envelope(self, env: Envelope) -> None:
        if not self.active:
            return
        msg, sender, now = env.payload, env.sender, self.sim.now
        if self.election is not None and sender != self.id:
            if isinstance(msg, (ElectionWire, ElectionAck)):
                self.election.on_message(sender, msg, now)
                return
            self.election.heard(sender, now)
        if isinstance(msg, (Reliable, ReliableAck)):
            if self.channel is not None:
                for body in self.channel.on_message(sender, msg):
                    self.dispatch(body, sender)
            return
        self.dispatch(msg, sender)

    def dispatch(self, msg: object, sender: str) -> None:
        if isinstance(msg, Heartbeat):
            return
        if isinstance(msg, CommitTask):
            self.handle_output(self.controller.receive_commit(msg, self.rel()))
        elif isinstance(msg, AbortTask):
            self.handle_output(self.controller.handle_abort(msg.task_id, self.rel()))
        elif isinstance(msg, StatusReport):
            if self.planner is not None:
                self.inbox.append(msg)
        elif isinstance(msg, LeaderAck):
            if self.planner is not None and msg.epoch == self.planner.epoch:
                self.acks.add(msg.agent)
        elif isinstance(msg, SyncRecords):
            self.sync.on_records(msg)
            self.awaiting_snapshot.discard(msg.sender)
        elif isinstance(msg, SyncAck):
            self.sync.on_ack(msg)
        elif isinstance(msg, SnapshotRequest):
            self.publish_own_state()
            self.sync.push_all(msg.sender)

    def handle_output(self, out: ControllerOutput) -> None:
        w = self.mission.window
        for kind, task_id, detail in out.events:
            if kind == "cleanup":
                self.record("cleanup", {"task": task_id, "command": detail, "window": w})
            elif kind == "accepted":
                task = self.controller.tracked[task_id]
                self._last_exec[task_id] = Status.COMMITTED.value
                self.record("exec", {"task": task_id, "status": Status.COMMITTED.value,
                                     "reason": "", "start": None, "end": None,
                                     "epoch": task.commit.epoch, "window": w,
                                     "planned": [task.commit.start, task.commit.end]})
        leader = self.controller.leader
        for rep in out.reports:
            if self._last_exec.get(rep.task_id) != rep.status:
                self._last_exec[rep.task_id] = rep.status
                self._record_exec(rep)
                if rep.status == Status.COMPLETED.value:
                    self._on_completed(rep.task_id)
            if leader is not None:
                self.send(leader, rep)
        if out.ack is not None and leader is not None:
            self.send(leader, out.ack)

    def _record_exec(self, rep: StatusReport) -> None:
        payload = {"task": rep.task_id, "status": rep.status, "reason": rep.reason,
                   "start": rep.actual_start, "end": rep.actual_end, "epoch": rep.epoch,
                   "window": self.mission.window}
        task = self.controller.tracked.get(rep.task_id) or self.controller.finished.get(rep.task_id)
        if task is not None:
            payload["planned"] = [task.commit.start, task.commit.end]
            if rep.status == Status.EXECUTING.value:
                guards = []
                for c in self.controller.local_constraints(task.template, Scope.MAINTENANCE):
                    if c.variable[0] == self.id and c.values is None:
                        guards.append([c.variable[1], _num(c.low), _num(c.high)])
                payload["guards"] = guards
        self.record("exec", payload)

    def _on_completed(self, task_id: str) -> None:
        task = self.controller.finished.get(task_id)
        if task is None:
            return
        cmd = task.template.command
        if cmd == "ssdb_map_sync":
            self.sync_tick()
        elif cmd == "ssdb_backup" and self.ann is not None and self.ann.survivor:
            self.sync.push_all(self.ann.survivor)
        elif cmd == "enter_low_power":
            self.low_power = True

    def on_milestone(self, task_id: str) -> None:
        self.record("milestone", {"task": task_id, "window": self.mission.window})
        self.participating = 0.0
        self.store.put_local((self.id, "region_done"), 1.0, self.sim.now)
        self.publish_own_state()
        self.sync_tick()

    # periodic duties ----------------------------------------------------------

    def heartbeat(self) -> None:
        for peer in self.sim.neighbors(self.id):
            self.send(peer, Heartbeat(self.id))

    def sync_tick(self) -> None:
        self.publish_own_state()
        ann = self.ann
        if ann is None:
            return
        self.sync.sync_tick(ann.leader, ann.survivor)

    def controller_state(self, rel: float) -> dict:
        state = self.live_values()
        state[(TEAM, "time")] = rel
        for name in ("coordinated", "experiment_complete", "survivor_available"):
            v = self.store.get((TEAM, name))
            if v is not None:
                state[(TEAM, name)] = v
        return state

    def controller_tick(self, rel: float) -> None:
        self.handle_output(self.controller.tick(self.controller_state(rel), rel))

    # leader duties --------------------------------------------------------------

    def planning_snapshot(self, rel: int) -> StateSnapshot:
        net = self.mission.network
        values: dict = {}
        ages: dict = {}
        live = self.live_values()
        now = self.sim.now
        for v in net.variables:
            key = v.key
            if key[0] == TEAM:
                continue
            if key in live:
                values[key] = live[key]
                ages[key] = 0.0
            else:
                rec = self.store.records.get(key)
                if rec is not None:
                    values[key] = float(rec.value)
                    ages[key] = now - rec.version[0]
        planner = self.planner
        in_progress = sum(1 for i in planner.instances.values()
                          if i.template.subtasks and i.status in (Status.COMMITTED, Status.EXECUTING)
                          and i.scheduled_start is not None and i.scheduled_start < rel)
        values[(TEAM, "time")] = float(rel)
        values[(TEAM, "coordinated")] = float(in_progress)
        values[(TEAM, "experiment_complete")] = float(
            self.store.get((TEAM, "experiment_complete"), 0.0))
        values[(TEAM, "survivor_available")] = 1.0 if self.ann and self.ann.survivor else 0.0
        return StateSnapshot(rel, values, leader=self.id, ages=ages)

    def observations(self) -> dict:
        """Latest synced measurements of other agents, as (value, window time)."""
        out = {}
        w0 = self.mission.window_start
        for v in self.mission.network.variables:
            if v.kind is not VarKind.CONTINUOUS or v.owner in (TEAM, self.id):
                continue
            rec = self.store.records.get(v.key)
            if rec is not None and rec.version[0] >= w0:
                out[v.key] = (float(rec.value), rec.version[0] - w0)
        return out

    def leader_tick(self, rel: float) -> None:
        planner = self.planner
        if planner is None:
            return
        now_i = int(round(rel))
        if self.activating_until is not None:
            # Plan once every member's state is in, or give up on the stragglers.
            if self.sim.now < self.activating_until - 1e-9:
                return
            if self.awaiting_snapshot and self.sim.now < self.activation_deadline - 1e-9:
                return
            self.activating_until = None
            self._load_task_records(planner)
            self._write_team_defaults()
            before = planner.statuses()
            plan = planner.replan(ReplanTrigger(ReplanKind.ACTIVATION, self.id, now_i),
                                  self.planning_snapshot(now_i))
            self._record_plan(plan, ReplanKind.ACTIVATION.value, self.id)
            self._record_status_changes(before)
            self._send_commits(planner.commit_due_tasks(now_i, self.acks))
            self._coordinate(now_i)
            return
        reports = [r for r in self.inbox
                   if r.epoch == planner.epoch
                   or r.status in (Status.COMPLETED.value, Status.FAILED.value)]
        self.inbox = []
        before = planner.statuses()
        res = planner.tick(reports, now_i, self.observations(), ready=self.acks)
        self._record_status_changes(before)
        self._update_team_flags(now_i)
        commits = res.commits
        if res.triggers:
            trig = res.triggers[0]
            before = planner.statuses()
            plan = planner.replan(trig, self.planning_snapshot(now_i))
            self._record_plan(plan, trig.kind.value, trig.source)
            self._record_status_changes(before)
            commits = planner.commit_due_tasks(now_i, self.acks)
        self._send_commits(commits)
        self._coordinate(now_i)

    def _load_task_records(self, planner: Planner) -> None:
        prefix = f"task:{self.mission.window}"
        for key, rec in sorted(self.store.records.items()):
            if key[0] != prefix:
                continue
            inst = planner.instances.get(key[1])
            if inst is not None and rec.value in (Status.COMPLETED.value, Status.FAILED.value):
                inst.status = Status(rec.value)

    def _write_team_defaults(self) -> None:
        now = self.sim.now
        for name in ("coordinated", "experiment_complete"):
            if self.store.get((TEAM, name)) is None:
                self.store.put_local((TEAM, name), 0.0, now)
        self._coord_value = self.store.get((TEAM, "coordinated"))
        avail = 1.0 if self.ann and self.ann.survivor else 0.0
        if self.store.get((TEAM, "survivor_available")) != avail:
            self.store.put_local((TEAM, "survivor_available"), avail, now)

    def _record_plan(self, plan, trigger: str, source: str) -> None:
        self.record("plan", {
            "epoch": plan.epoch, "trigger": trigger, "source": source, "now": plan.now,
            "window": self.mission.window,
            "entries": [[e.id, e.executor, e.start, e.end, e.status.value]
                        for e in plan.scheduled()],
            "rejected": list(plan.rejected)})

    def _record_status_changes(self, before: Mapping[str, Status]) -> None:
        now = self.sim.now
        w = self.mission.window
        for iid, inst in sorted(self.planner.instances.items()):
            if before.get(iid) is inst.status:
                continue
            self.record("planner-status", {"task": iid, "status": inst.status.value,
                                           "epoch": self.planner.epoch, "window": w})
            if inst.status.terminal:
                self.store.put_local((f"task:{w}", iid), inst.status.value, now, size=16)
                if inst.template.subtasks and inst.status is Status.COMPLETED:
                    runs = float(self.store.get((TEAM, "formation_runs"), 0.0)) + 1
                    self.store.put_local((TEAM, "formation_runs"), runs, now)

    def _update_team_flags(self, rel: int) -> None:
        planner = self.planner
        now = self.sim.now
        coordinated = 0.0
        for inst in planner.instances.values():
            if not inst.template.subtasks or inst.status not in (Status.COMMITTED,
                                                                 Status.EXECUTING):
                continue
            kids = [k for k in planner.instances.values() if k.parent == inst.id]
            broken = any(k.status in (Status.FAILED, Status.ABORTED, Status.DROPPED)
                         for k in kids)
            if inst.scheduled_start is not None and rel >= inst.scheduled_start and not broken:
                coordinated = 1.0
        if coordinated != self._coord_value:
            self._coord_value = coordinated
            self.store.put_local((TEAM, "coordinated"), coordinated, now)
        if self.store.get((TEAM, "experiment_complete"), 0.0) != 1.0 and self._experiment_done():
            self.store.put_local((TEAM, "experiment_complete"), 1.0, now)
            self.record("experiment-complete", {"window": self.mission.window})

    def _experiment_done(self) -> bool:
        m = self.mission
        if m.scenario.mission == "formation":
            return self.store.get((TEAM, "formation_runs"), 0.0) >= m.scenario.formation_goal
        rovers = m.network.rovers
        return all(self.store.get((r, "region_done"), 0.0) == 1.0 for r in rovers)

    def _send_commits(self, commits: Iterable[CommitTask]) -> None:
        planner = self.planner
        w = self.mission.window
        tops = []
        for msg in commits:
            self.record("commit", {"task": msg.task_id, "executor": msg.executor,
                                   "start": msg.start, "end": msg.end, "epoch": msg.epoch,
                                   "sent_at": msg.sent_at, "window": w})
            self.send(msg.executor, msg)
            inst = planner.instances[msg.task_id]
            top = inst.parent or inst.id
            if top not in tops:
                tops.append(top)
        if not tops or planner.plan is None:
            return
        entries = planner.plan.entries
        children = {t: [e for e in entries.values() if e.parent == t] for t in tops}
        self.coordinator.register([entries[t] for t in tops if t in entries], children)

    def _coordinate(self, rel: int) -> None:
        planner = self.planner
        if not self.coordinator.watches:
            return
        view = {}
        for key in [(TEAM, "coordinated")] + [(r, "participating")
                                              for r in self.mission.network.rovers]:
            v = self.live_values().get(key, self.store.get(key))
            if v is not None:
                view[key] = float(v)
        executors = {iid: (self.id if i.template.executor == LEADER else i.template.executor)
                     for iid, i in planner.instances.items()}
        n_log = len(self.coordinator.log)
        aborts = self.coordinator.evaluate(view, planner.statuses(), rel, executors)
        for t, task_id, event in self.coordinator.log[n_log:]:
            if event != "abort-sent":
                self.record("coordination", {"task": task_id, "event": event,
                                             "window": self.mission.window})
        for recipient, msg in aborts:
            self.record("abort", {"task": msg.task_id, "to": recipient,
                                  "window": self.mission.window})
            self.send(recipient, msg)


def _num(x: float) -> float | None:
    return None if math.isinf(x) else x


# ---------------------------------------------------------------------------
# Simulation


@dataclass
class RunResult:
    scenario: str
    seed: int
    trace: list[dict]
    trace_hash: str
    warnings: list[str]

    def jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, default=str) + "\n" for r in self.trace)


class Simulation:
    """Runs one scenario deterministically for its duration."""

    activation_delay = 2.0
    activation_timeout = 8.0
    resend_after = 1.0
    clock_step = 0.5

    def __init__(self, scenario: Scenario, seed: int | None = None,
                 network_config: NetworkConfig | None = None,
                 scheduler_config: SchedulerConfig | None = None,
                 election_config: ElectionConfig | None = None):
        scenario.validate()
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.cycle = WakeCycle()
        self.env = scenario.environment
        self.net_config = network_config or NetworkConfig(window=int(self.cycle.active))
        self.scheduler_config = scheduler_config or SchedulerConfig()
        self.election_config = election_config or ElectionConfig()
        roles = scenario.roles
        if scenario.mission == "exploration":
            self.network: TaskNetwork = build_exploration_network(
                roles, region=scenario.region, cycles=scenario.cycles,
                config=self.net_config, env=self.env)
        else:
            self.network = build_formation_network(roles, cycles=scenario.cycles,
                                                   config=self.net_config, env=self.env)
        self.background = background_rates(self.network, self.env)
        self.planning_window = (0, self.net_config.window - self.net_config.shutdown_guard)
        n_rovers = len(self.network.rovers)
        self.sub_region = scenario.region / n_rovers
        self.explore_rate = scenario.explore_rate or self.sub_region / (
            1.75 * self.net_config.drive_duration)
        links = full_mesh([a.id for a in scenario.agents], latency=scenario.latency,
                          jitter=scenario.jitter, drop=scenario.drop)
        by_key = {link.key: link for link in links}
        for o in scenario.link_overrides:
            o = dict(o)
            key = frozenset((o.pop("a"), o.pop("b")))
            if key not in by_key:
                raise ScenarioError(f"override for unknown link {sorted(key)}")
            base = by_key[key]
            kw = {"latency": base.latency, "jitter": base.jitter, "drop": base.drop,
                  "weight": base.weight, **o}
            kw["blackouts"] = [tuple(b) for b in kw.get("blackouts", [])]
            by_key[key] = LinkModel(base.a, base.b, **kw)
        self.sim = Simulator(self.seed, by_key.values())
        for m in scenario.mutes:
            self.sim.mute(m["agent"], float(m["start"]), float(m["end"]))
        self.script = FaultScript(list(scenario.faults))
        self.agents = {a.id: Agent(self, a) for a in sorted(scenario.agents, key=lambda a: a.id)}
        for aid, agent in self.agents.items():
            self.sim.register(aid, agent.on_envelope)
        self.window: int | None = None
        self.window_start = 0.0
        self.warnings: list[str] = []
        last = self.cycle.shutdown_time(scenario.windows - 1)
        self.duration = scenario.duration if scenario.duration is not None else last + 1.0
        self._timers = {t: (kind, i) for t, kind, i in self.cycle.events(scenario.windows)}
        self._schedule()

    # clock ---------------------------------------------------------------

    def rel(self, t: float) -> float:
        return t - self.window_start

    def _schedule(self) -> None:
        s = self.scenario
        self.sim.record("scenario", None, {
            "name": s.name, "mission": s.mission, "seed": self.seed,
            "agents": s.roles, "windows": s.windows, "cycles": s.cycles,
            "soc_floor": self.net_config.soc_floor, "temp_limit": self.net_config.temp_limit,
            "shutdown": [self.cycle.shutdown_time(i) for i in range(s.windows)],
            "latency": s.latency, "jitter": s.jitter, "drop": s.drop,
            "aborts_enabled": s.aborts_enabled, "faults": [f.label() for f in s.faults if f.behavior != "nominal"],
            "scripted": s.scripted})
        self.sim.every(self.clock_step, 0.0, "clock", self._clock, until=self.duration)
        for k in sorted(s.kills, key=lambda k: (k["time"], k["agent"])):
            self.sim.schedule(float(k["time"]), "kill",
                              lambda a=k["agent"]: self.kill(a))
        for p in sorted(s.perturbations, key=lambda p: (p["time"], p["agent"])):
            self.sim.schedule(float(p["time"]), "perturb", lambda p=p: self._perturb(p))

    def _clock(self) -> None:
        t = self.sim.now
        timer = self._timers.get(t)
        if timer is not None:
            kind, idx = timer
            if kind == "wake":
                self._wake(idx)
            else:
                self._shutdown(idx)
                return
        if self.window is None:
            return
        live = [a for a in self.agents.values() if a.active]
        for a in live:
            a.heartbeat()
            a.channel.poll(t)
        for a in live:
            a.election.poll(t)
        if abs(t - round(t)) > 1e-9:
            return
        cfg = self.election_config
        phase = (t - cfg.round_offset) / cfg.round_period
        if abs(phase - round(phase)) < 1e-9 and phase >= 0:
            for a in live:
                a.election.start_round(int(round(phase)), t)
        rel = self.rel(t)
        for a in live:
            a.integrate(t)
            rec = {"temp": round(a.temp, 4), "mode": a.mode()}
            if a.soc is not None:
                rec["soc"] = round(a.soc, 4)
            a.record("state", rec)
        for a in live:
            a.controller_tick(rel)
        if abs((t - SYNC_PERIOD / 2) % SYNC_PERIOD) < 1e-9:
            for a in live:
                a.sync_tick()
        for a in live:
            a.leader_tick(rel)

    def _wake(self, idx: int) -> None:
        self.window = idx
        self.window_start = self.cycle.window_start(idx)
        self.sim.record("wake", None, {"window": idx})
        for a in self.agents.values():
            if a.dead:
                continue
            self.sim.restart(a.id, "fpga-wake")
            a.wake(self.sim.now)

    def _shutdown(self, idx: int) -> None:
        modes = {aid: a.mode() for aid, a in self.agents.items() if a.active}
        self.sim.record("shutdown", None, {"window": idx, "modes": modes})
        for a in self.agents.values():
            if a.active:
                a.integrate(self.sim.now)
                a.power_down("fpga")
                self.sim.crash(a.id, "fpga-shutdown")
        self.window = None

    def kill(self, agent_id: str) -> None:
        a = self.agents[agent_id]
        if a.dead:
            return
        self.sim.record("kill", agent_id, {"window": self.window})
        if a.active:
            a.power_down("crash")
        a.dead = True
        self.sim.crash(agent_id)

    def _perturb(self, p: Mapping) -> None:
        a = self.agents[p["agent"]]
        if p["variable"] == "soc" and a.soc is not None:
            a.soc = float(p["value"])
        elif p["variable"] == "cpu_temp":
            a.temp = float(p["value"])
        self.sim.record("perturb", a.id, {"variable": p["variable"], "value": p["value"]})

    # transport ------------------------------------------------------------

    def transmit(self, sender: str, recipient: str, msg: object) -> None:
        if sender == recipient:
            env = Envelope(0, sender, recipient, msg, self.sim.now, self.sim.now)
            self.sim.record("local", sender, {"msg": type(msg).__name__})
            self.sim.schedule(self.sim.now, "local",
                              lambda: self.agents[recipient].on_envelope(env))
            return
        self.sim.send(sender, recipient, msg)

    def claim_fault(self, task_id: str, template: TaskTemplate, agent: str) -> FaultSpec | None:
        spec = self.script.claim(task_id, template, agent, self.window)
        if spec is not None and spec.behavior != "nominal":
            self.sim.record("fault", agent, {"task": task_id, "behavior": spec.behavior,
                                             "amount": spec.amount, "window": self.window})
        return spec

    # run -------------------------------------------------------------------

    def run(self) -> RunResult:
        self.sim.run(self.duration)
        for a in self.agents.values():
            for task in sorted(a.controller.tracked.values(), key=lambda t: t.id):
                self.sim.record("open", a.id, {"task": task.id, "status": task.status.value,
                                               "window": self.window})
        for spec in self.script.unmatched():
            self.warnings.append(f"fault selector matched nothing: {spec}")
        for w in self.warnings:
            self.sim.record("warning", None, {"message": w})
        return RunResult(self.scenario.name, self.seed, self.sim.trace,
                         self.sim.trace_hash(), list(self.warnings))


def run_scenario(scenario: Scenario, seed: int | None = None) -> RunResult:
    return Simulation(scenario, seed).run()
