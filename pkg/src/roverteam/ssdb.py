"""Availability-first shared state store with last-writer-wins merge.

Each agent owns the keys ``(agent_id, name)``; the leader additionally
writes team keys ``("team", name)`` and task-status records.  Records carry
a version ``(write time, writer id, writer sequence)`` that totally orders
all writes, so merging is commutative, associative and idempotent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .messages import SyncAck, SyncRecords
from .tasknet.model import TEAM

Version = tuple[float, str, int]
Key = tuple[str, str]

SYNC_PERIOD = 10.0


@dataclass(frozen=True)
class VersionedRecord:
    key: Key
    value: Any
    version: Version
    planning: bool = True
    size: int = 8

    def as_tuple(self) -> tuple:
        return (self.key, self.value, self.version, self.planning, self.size)

    @classmethod
    def from_tuple(cls, t: tuple) -> VersionedRecord:
        key, value, version, planning, size = t
        return cls(tuple(key), value, tuple(version), planning, size)


class ForeignKeyWrite(PermissionError):
    pass


@dataclass
class PlanningView:
    """Latest known value per key with its age; absent keys are listed, not defaulted."""

    values: dict[Key, Any]
    ages: dict[Key, float]
    missing: list[Key]


class SharedStore:
    def __init__(self, agent: str):
        self.agent = agent
        self.records: dict[Key, VersionedRecord] = {}
        self._seq = 0
        self._acked: dict[str, dict[Key, Version]] = {}
        self.team_writer = False

    # local writes ----------------------------------------------------------

    def can_write(self, key: Key) -> bool:
        owner = key[0]
        if owner == self.agent:
            return True
        return self.team_writer and (owner == TEAM or owner.startswith("task:"))

    def put_local(self, key: Key, value: Any, now: float, planning: bool = True,
                  size: int = 8) -> Version:
        if not self.can_write(key):
            raise ForeignKeyWrite(f"{self.agent} cannot write {key}")
        self._seq += 1
        version = (float(now), self.agent, self._seq)
        self.records[key] = VersionedRecord(tuple(key), value, version, planning, size)
        return version

    def get(self, key: Key, default: Any = None) -> Any:
        rec = self.records.get(tuple(key))
        return default if rec is None else rec.value

    def version(self, key: Key) -> Version | None:
        rec = self.records.get(tuple(key))
        return None if rec is None else rec.version

    # merging ------------------------------------------------------------------

    def merge(self, incoming: Iterable[VersionedRecord]) -> list[bool]:
        """Apply each record if its version is newer; returns applied flags."""
        applied = []
        for rec in incoming:
            cur = self.records.get(rec.key)
            if cur is None or rec.version > cur.version:
                self.records[rec.key] = rec
                applied.append(True)
            else:
                applied.append(False)
        return applied

    def state(self) -> dict[Key, tuple[Any, Version]]:
        return {k: (r.value, r.version) for k, r in sorted(self.records.items())}

    # sync protocol --------------------------------------------------------------

    def outgoing(self, target: str, own_only: bool = True) -> list[VersionedRecord]:
        """Planning-relevant records the target has not acknowledged yet."""
        acked = self._acked.get(target, {})
        out = []
        for key, rec in sorted(self.records.items()):
            if not rec.planning:
                continue
            if own_only and rec.version[1] != self.agent:
                continue
            seen = acked.get(key)
            if seen is None or rec.version > seen:
                out.append(rec)
        return out

    def acknowledge(self, target: str, versions: Iterable[tuple[Key, Version]]) -> None:
        acked = self._acked.setdefault(target, {})
        for key, version in versions:
            key, version = tuple(key), tuple(version)
            if key not in acked or version > acked[key]:
                acked[key] = version

    def forget_acks(self, target: str | None = None) -> None:
        if target is None:
            self._acked.clear()
        else:
            self._acked.pop(target, None)

    # planning ------------------------------------------------------------------

    def planning_view(self, now: float, keys: Iterable[Key]) -> PlanningView:
        values, ages, missing = {}, {}, []
        for key in keys:
            rec = self.records.get(tuple(key))
            if rec is None:
                missing.append(tuple(key))
                continue
            values[tuple(key)] = rec.value
            ages[tuple(key)] = now - rec.version[0]
        return PlanningView(values, ages, missing)


def max_versions(stores: Iterable[SharedStore | Mapping[Key, VersionedRecord]]
                 ) -> dict[Key, VersionedRecord]:
    """Per-key maximum version over several stores (the convergence target)."""
    best: dict[Key, VersionedRecord] = {}
    for s in stores:
        recs = s.records if isinstance(s, SharedStore) else s
        for k, r in recs.items():
            if k not in best or r.version > best[k].version:
                best[k] = r
    return best


class SyncEndpoint:
    """Drives one store's side of the periodic sync exchange.

    ``send(recipient, message)`` is the transport hook.  Records stay in the
    outgoing set until the recipient acknowledges them, so anything lost in
    transit is resent on the next tick.
    """

    def __init__(self, store: SharedStore, send):
        self.store = store
        self.send = send
        self._batch = 0

    @property
    def agent(self) -> str:
        return self.store.agent

    def sync_tick(self, leader: str | None, survivor: str | None,
                  own_only: bool = True) -> list[SyncRecords]:
        sent = []
        for target in sorted({leader, survivor} - {None, self.agent}):
            recs = self.store.outgoing(target, own_only=own_only)
            if not recs:
                continue
            self._batch += 1
            msg = SyncRecords(self.agent, tuple(r.as_tuple() for r in recs), self._batch)
            self.send(target, msg)
            sent.append(msg)
        return sent

    def push_all(self, target: str) -> SyncRecords | None:
        """Full-store backup push (records from every writer)."""
        recs = self.store.outgoing(target, own_only=False)
        if not recs or target == self.agent:
            return None
        self._batch += 1
        msg = SyncRecords(self.agent, tuple(r.as_tuple() for r in recs), self._batch)
        self.send(target, msg)
        return msg

    def on_records(self, msg: SyncRecords) -> list[bool]:
        recs = [VersionedRecord.from_tuple(t) for t in msg.records]
        applied = self.store.merge(recs)
        self.send(msg.sender, SyncAck(self.agent, msg.batch,
                                      tuple((r.key, r.version) for r in recs)))
        return applied

    def on_ack(self, msg: SyncAck) -> None:
        self.store.acknowledge(msg.sender, msg.versions)
