"""Declarative task networks and the two mission builders."""

from .builders import (
    InvalidNetwork,
    NetworkConfig,
    NetworkError,
    ValidationReport,
    build_exploration_network,
    build_formation_network,
    expand_instances,
    participation_subsets,
    validate_network,
)
from .model import (
    LEADER,
    TEAM,
    TERMINAL,
    TRANSITIONS,
    Constraint,
    IllegalTransition,
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
    instance_id,
    within,
)
from .textio import ParseError, dump_network, load_network

__all__ = [
    "LEADER", "TEAM", "TERMINAL", "TRANSITIONS", "Constraint", "IllegalTransition",
    "Impact", "ImpactKind", "InvalidNetwork", "Locus", "NetworkConfig", "NetworkError",
    "ParseError", "Scope", "StateVariable", "Status", "TaskInstance", "TaskNetwork",
    "TaskTemplate", "ValidationReport", "VarKind", "after", "build_exploration_network",
    "build_formation_network", "dump_network", "equals", "expand_instances",
    "instance_id", "load_network", "participation_subsets", "validate_network", "within",
]
