"""Domain types for declarative task networks."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping

LEADER = "LEADER"
TEAM = "team"

VarKey = tuple[str, str]


class VarKind(str, enum.Enum):
    CONTINUOUS = "continuous"
    FLAG = "discrete-flag"


class Scope(str, enum.Enum):
    PRE = "pre-execution"
    MAINTENANCE = "maintenance"
    PRECEDENCE = "precedence"


class Locus(str, enum.Enum):
    LOCAL = "local"
    MULTI = "multi-agent"


class ImpactKind(str, enum.Enum):
    START = "delta-at-start"
    END = "delta-at-end"
    RATE = "linear-rate"


class Status(str, enum.Enum):
    UNSCHEDULED = "unscheduled"
    SCHEDULED = "scheduled"
    COMMITTED = "committed"
    EXECUTING = "executing"
    COMPLETED = "completed"
    FAILED = "failed"
    ABORTED = "aborted"
    DROPPED = "dropped"

    @property
    def terminal(self) -> bool:
        return self in TERMINAL


TERMINAL = frozenset({Status.COMPLETED, Status.FAILED, Status.ABORTED, Status.DROPPED})

TRANSITIONS: dict[Status, frozenset[Status]] = {
    Status.UNSCHEDULED: frozenset({Status.SCHEDULED}),
    Status.SCHEDULED: frozenset({Status.COMMITTED, Status.UNSCHEDULED}),
    Status.COMMITTED: frozenset({Status.EXECUTING, Status.DROPPED, Status.FAILED}),
    Status.EXECUTING: frozenset({Status.COMPLETED, Status.FAILED, Status.ABORTED}),
    Status.COMPLETED: frozenset(),
    Status.FAILED: frozenset(),
    Status.ABORTED: frozenset(),
    Status.DROPPED: frozenset(),
}


class IllegalTransition(ValueError):
    pass


def var_label(key: VarKey) -> str:
    return f"{key[0]}.{key[1]}"


def parse_var_label(label: str) -> VarKey:
    owner, sep, name = label.partition(".")
    if not sep or not owner or not name:
        raise ValueError(f"bad variable reference {label!r}")
    return owner, name


@dataclass(frozen=True)
class StateVariable:
    name: str
    owner: str
    kind: VarKind = VarKind.CONTINUOUS
    units: str = ""
    bounds: tuple[float, float] | None = None
    values: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind is VarKind.CONTINUOUS and self.bounds is None:
            raise ValueError(f"continuous variable {self.name} needs bounds")
        if self.kind is VarKind.FLAG and not self.values:
            raise ValueError(f"flag {self.name} needs allowed values")

    @property
    def key(self) -> VarKey:
        return (self.owner, self.name)


@dataclass(frozen=True)
class Constraint:
    """A state or precedence condition attached to a task.

    State constraints name a variable and either a closed interval
    ``[low, high]`` (continuous) or a set of allowed values (flags).
    Precedence constraints name one or more predecessor templates; any one
    of them satisfies the constraint once it is placed earlier in the plan
    or has finished with a status in ``finished``.  ``waive_if`` switches a
    precedence off while the given variable holds the given value (used
    for rovers that are not participating).
    """

    scope: Scope
    variable: VarKey | None = None
    low: float = -math.inf
    high: float = math.inf
    values: frozenset[float] | None = None
    locus: Locus = Locus.LOCAL
    predecessors: tuple[str, ...] = ()
    finished: frozenset[Status] = frozenset({Status.COMPLETED})
    waive_if: tuple[VarKey, float] | None = None

    def __post_init__(self):
        if self.scope is Scope.PRECEDENCE:
            if not self.predecessors:
                raise ValueError("precedence constraint without predecessor")
        elif self.variable is None:
            raise ValueError("state constraint without variable")

    @property
    def is_state(self) -> bool:
        return self.scope is not Scope.PRECEDENCE

    def bounds(self) -> tuple[float, float]:
        if self.values is not None:
            return min(self.values), max(self.values)
        return self.low, self.high

    def admits(self, value: float, tol: float = 1e-9) -> bool:
        if self.values is not None:
            return any(abs(value - v) <= tol for v in self.values)
        return self.low - tol <= value <= self.high + tol

    def with_variable(self, variable: VarKey) -> Constraint:
        return replace(self, variable=variable)


def within(var: VarKey, low: float = -math.inf, high: float = math.inf,
           scope: Scope = Scope.MAINTENANCE, locus: Locus = Locus.LOCAL) -> Constraint:
    return Constraint(scope, var, low=low, high=high, locus=locus)


def equals(var: VarKey, value: float, scope: Scope = Scope.PRE,
           locus: Locus = Locus.LOCAL) -> Constraint:
    return Constraint(scope, var, values=frozenset({float(value)}), locus=locus)


def after(*predecessors: str, finished: Iterable[Status] = (Status.COMPLETED,),
          waive_if: tuple[VarKey, float] | None = None) -> Constraint:
    return Constraint(Scope.PRECEDENCE, predecessors=tuple(predecessors),
                      finished=frozenset(finished), waive_if=waive_if)


@dataclass(frozen=True)
class Impact:
    variable: VarKey
    kind: ImpactKind
    amount: float

    def with_variable(self, variable: VarKey) -> Impact:
        return replace(self, variable=variable)


@dataclass(frozen=True)
class TaskTemplate:
    """The planner's unit of work.

    ``mode`` is the operating mode the task puts its executor in; it drives
    both resource rates and executor exclusivity.  A template with
    ``min_duration`` set may be shortened by the planner down to that
    duration when a maintenance constraint would otherwise be violated.
    """

    id: str
    executor: str
    command: str
    duration: int
    priority: int = 0
    preferred_start: int = 0
    cleanup: str | None = None
    constraints: tuple[Constraint, ...] = ()
    impacts: tuple[Impact, ...] = ()
    subtasks: tuple[TaskTemplate, ...] = ()
    instance_count: int = 1
    mode: str = "idle"
    kind: str = ""
    min_duration: int | None = None
    pinned_to_parent: bool = False

    @property
    def is_parent(self) -> bool:
        return bool(self.subtasks)

    def state_constraints(self, scope: Scope | None = None) -> list[Constraint]:
        return [c for c in self.constraints
                if c.is_state and (scope is None or c.scope is scope)]

    def precedences(self) -> list[Constraint]:
        return [c for c in self.constraints if c.scope is Scope.PRECEDENCE]


@dataclass
class TaskInstance:
    template: TaskTemplate
    index: int = 0
    status: Status = Status.UNSCHEDULED
    scheduled_start: float | None = None
    scheduled_end: float | None = None
    actual_start: float | None = None
    actual_end: float | None = None
    parent: str | None = None

    @property
    def id(self) -> str:
        return instance_id(self.template, self.index)

    @property
    def priority(self) -> int:
        return self.template.priority

    def transition(self, new: Status) -> None:
        if new not in TRANSITIONS[self.status]:
            raise IllegalTransition(f"{self.id}: {self.status.value} -> {new.value}")
        self.status = new


def instance_id(template: TaskTemplate, index: int) -> str:
    if template.instance_count == 1:
        return template.id
    return f"{template.id}#{index}"


@dataclass
class TaskNetwork:
    tasks: list[TaskTemplate]
    variables: list[StateVariable]
    agents: dict[str, str]
    name: str = ""
    _index: dict[str, TaskTemplate] = field(default_factory=dict, init=False,
                                            repr=False, compare=False)

    def all_templates(self) -> Iterator[TaskTemplate]:
        for t in self.tasks:
            yield t
            yield from t.subtasks

    def template(self, template_id: str) -> TaskTemplate:
        if not self._index:
            self._index = {t.id: t for t in self.all_templates()}
        return self._index[template_id]

    def has_template(self, template_id: str) -> bool:
        try:
            self.template(template_id)
        except KeyError:
            return False
        return True

    def parent_of(self, template_id: str) -> TaskTemplate | None:
        for t in self.tasks:
            if any(s.id == template_id for s in t.subtasks):
                return t
        return None

    def variable(self, key: VarKey) -> StateVariable:
        for v in self.variables:
            if v.key == key:
                return v
        raise KeyError(var_label(key))

    @property
    def rovers(self) -> list[str]:
        return sorted(a for a, role in self.agents.items() if role == "rover")

    @property
    def base_stations(self) -> list[str]:
        return sorted(a for a, role in self.agents.items() if role == "base-station")


def resolve_owner(owner: str, roles: Mapping[str, str]) -> str:
    """Map role tokens such as ``LEADER`` to concrete agent ids."""
    return roles.get(owner, owner)
