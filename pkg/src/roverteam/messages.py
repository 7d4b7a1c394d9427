"""Typed messages exchanged between agents through the simulated network."""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, fields, is_dataclass
from typing import Any

ABORT_TYPE_BYTE = 0x41  # "A"


@dataclass(frozen=True)
class CommitTask:
    task_id: str
    template_id: str
    executor: str
    start: int
    end: int
    epoch: int
    sent_at: int = 0


@dataclass(frozen=True)
class StatusReport:
    task_id: str
    agent: str
    status: str
    time: float
    epoch: int
    reason: str = ""
    actual_start: float | None = None
    actual_end: float | None = None


@dataclass(frozen=True)
class AbortTask:
    """Abort request carrying nothing but the task id.

    Wire layout: one type byte (0x41) followed by the UTF-8 task id.
    """

    task_id: str

    def to_bytes(self) -> bytes:
        return bytes([ABORT_TYPE_BYTE]) + self.task_id.encode("utf-8")

    @classmethod
    def from_bytes(cls, data: bytes) -> AbortTask:
        if not data or data[0] != ABORT_TYPE_BYTE:
            raise ValueError("not an abort record")
        return cls(data[1:].decode("utf-8"))


@dataclass(frozen=True)
class LeaderAnnouncement:
    round: int
    leader: str
    survivor: str | None
    epoch: int
    appointer: str
    members: tuple[str, ...] = ()


@dataclass(frozen=True)
class LeaderAck:
    agent: str
    epoch: int


@dataclass(frozen=True)
class SyncRecords:
    sender: str
    records: tuple = ()
    batch: int = 0


@dataclass(frozen=True)
class SyncAck:
    sender: str
    batch: int
    versions: tuple = ()


@dataclass(frozen=True)
class SnapshotRequest:
    sender: str
    epoch: int


@dataclass(frozen=True)
class ScoreReport:
    """Convergecast of margin scores toward the appointer."""

    round: int
    scores: tuple[tuple[str, float], ...] = ()


@dataclass(frozen=True)
class Heartbeat:
    sender: str


@dataclass(frozen=True)
class Reliable:
    """Sequenced envelope for control messages that must eventually arrive.

    ``floor`` is the sender's lowest unacknowledged sequence number; the
    receiver never waits for anything below it.
    """

    session: float
    seq: int
    floor: int
    body: Any


@dataclass(frozen=True)
class ReliableAck:
    session: float
    seq: int


def _plain(value: Any) -> Any:
    if is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    return value


def _summarize(msg: Any) -> dict:
    body = _plain(msg) if is_dataclass(msg) else {"value": repr(msg)}
    return {"type": type(msg).__name__, **body}


def _size(msg: Any) -> int:
    if isinstance(msg, AbortTask):
        return len(msg.to_bytes())
    return len(json.dumps(_summarize(msg), sort_keys=True, separators=(",", ":")))


# Frozen messages repeat a lot (heartbeats above all), so results are cached.
_summary_cache = functools.lru_cache(maxsize=8192)(_summarize)
_size_cache = functools.lru_cache(maxsize=8192)(_size)


def summarize(msg: Any) -> dict:
    """JSON-friendly payload summary used in traces.  Treat as read-only."""
    try:
        return _summary_cache(msg)
    except TypeError:
        return _summarize(msg)


def message_size(msg: Any) -> int:
    """Bytes on the wire; aborts use their compact encoding."""
    try:
        return _size_cache(msg)
    except TypeError:
        return _size(msg)
