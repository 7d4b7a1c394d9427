"""Deterministic discrete-event clock and lossy message transport."""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .messages import Reliable, ReliableAck, message_size, summarize


@dataclass
class LinkModel:
    """A bidirectional link; blackouts are half-open ``[t1, t2)`` intervals."""

    a: str
    b: str
    latency: float = 0.2
    jitter: float = 0.05
    drop: float = 0.0
    blackouts: list[tuple[float, float]] = field(default_factory=list)
    weight: float | None = None

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("link endpoints must differ")
        if self.latency < 0 or self.jitter < 0:
            raise ValueError("latency and jitter must be non-negative")
        if not 0.0 <= self.drop <= 1.0:
            raise ValueError("drop probability must be in [0, 1]")
        spans = sorted(self.blackouts)
        for (s1, e1), (s2, _) in zip(spans, spans[1:]):
            if s2 < e1:
                raise ValueError("blackout intervals overlap")
        for s, e in spans:
            if e < s:
                raise ValueError("blackout interval ends before it starts")
        self.blackouts = spans

    @property
    def key(self) -> frozenset[str]:
        return frozenset((self.a, self.b))

    def blacked_out(self, t: float) -> bool:
        return any(s <= t < e for s, e in self.blackouts)


@dataclass
class Envelope:
    msg_id: int
    sender: str
    recipient: str
    payload: Any
    send_time: float
    deliver_time: float | None = None
    dropped: bool = False


@dataclass(order=True)
class _Event:
    time: float
    seq: int
    kind: str = field(compare=False)
    action: Callable[[], None] | None = field(compare=False, default=None)


class UnknownEndpoint(KeyError):
    pass


def _round(t: float) -> float:
    return round(t, 6)


class Simulator:
    """Single event loop: timers, message deliveries and trace records."""

    def __init__(self, seed: int = 0, links: Iterable[LinkModel] = ()):
        self.seed = seed
        self.rng = random.Random(seed)
        self.now = 0.0
        self._queue: list[_Event] = []
        self._seq = 0
        self._msg_ids = 0
        self.links: dict[frozenset[str], LinkModel] = {}
        self.handlers: dict[str, Callable[[Envelope], None]] = {}
        self.down: set[str] = set()
        self.muted: dict[str, list[tuple[float, float]]] = {}
        self.trace: list[dict] = []
        self._last_delivery: dict[tuple[str, str], float] = {}
        self.sent = 0
        self.delivered = 0
        self.dropped = 0
        for link in links:
            self.add_link(link)

    # topology ------------------------------------------------------------

    def add_link(self, link: LinkModel) -> None:
        self.links[link.key] = link

    def link(self, a: str, b: str) -> LinkModel:
        try:
            return self.links[frozenset((a, b))]
        except KeyError:
            raise UnknownEndpoint(f"no link {a}<->{b}") from None

    def register(self, agent: str, handler: Callable[[Envelope], None]) -> None:
        self.handlers[agent] = handler

    def neighbors(self, agent: str) -> list[str]:
        return sorted(next(iter(k - {agent})) for k in self.links if agent in k)

    def crash(self, agent: str, kind: str = "crash") -> None:
        self.down.add(agent)
        self.record(kind, agent)

    def restart(self, agent: str, kind: str = "restart") -> None:
        self.down.discard(agent)
        self.record(kind, agent)

    def mute(self, agent: str, start: float, end: float) -> None:
        """Drop everything ``agent`` transmits during ``[start, end)``; it still receives."""
        if end < start:
            raise ValueError("mute interval ends before it starts")
        self.muted.setdefault(agent, []).append((start, end))

    def _muted(self, agent: str, t: float) -> bool:
        return any(s <= t < e for s, e in self.muted.get(agent, ()))

    # events --------------------------------------------------------------

    def schedule(self, time: float, kind: str, action: Callable[[], None] | None) -> None:
        if time < self.now:
            raise ValueError(f"cannot schedule {kind} in the past ({time} < {self.now})")
        heapq.heappush(self._queue, _Event(time, self._seq, kind, action))
        self._seq += 1

    def every(self, period: float, first: float, kind: str,
              action: Callable[[], None], until: float | None = None) -> None:
        """Periodic timer; each firing schedules the next one."""

        def fire(t=first):
            action()
            nxt = t + period
            if until is None or nxt <= until:
                self.schedule(nxt, kind, lambda: fire(nxt))

        self.schedule(first, kind, fire)

    def run(self, until: float) -> int:
        """Fire events in (time, sequence) order up to and including ``until``."""
        if until < self.now:
            raise ValueError("cannot run backwards")
        fired = 0
        while self._queue and self._queue[0].time <= until:
            ev = heapq.heappop(self._queue)
            self.now = ev.time
            if ev.action is not None:
                ev.action()
            fired += 1
        self.now = until
        return fired

    def pending(self) -> int:
        return len(self._queue)

    # messages -------------------------------------------------------------

    def send(self, sender: str, recipient: str, payload: Any) -> Envelope:
        if sender == recipient:
            raise ValueError("sender and recipient must differ")
        link = self.link(sender, recipient)
        self._msg_ids += 1
        env = Envelope(self._msg_ids, sender, recipient, payload, self.now)
        self.sent += 1
        size = message_size(payload)
        # Draws happen for every send so the random stream is independent of outcomes.
        u_drop = self.rng.random()
        u_jit = self.rng.random()
        if (sender in self.down or link.blacked_out(self.now) or self._muted(sender, self.now)
                or u_drop < link.drop):
            env.dropped = True
            self.dropped += 1
            self.record("drop", sender, {"to": recipient, "msg": summarize(payload)}, size)
            return env
        t = self.now + link.latency + link.jitter * u_jit
        lane = (sender, recipient)
        t = max(t, self._last_delivery.get(lane, 0.0))
        self._last_delivery[lane] = t
        env.deliver_time = t
        self.record("send", sender, {"to": recipient, "id": env.msg_id,
                                     "msg": summarize(payload)}, size)
        self.schedule(t, "deliver", lambda: self._deliver(env))
        return env

    def _deliver(self, env: Envelope) -> None:
        if env.recipient in self.down:
            self.dropped += 1
            self.record("lost", env.recipient, {"from": env.sender, "id": env.msg_id})
            return
        self.delivered += 1
        self.record("deliver", env.recipient, {"from": env.sender, "id": env.msg_id})
        handler = self.handlers.get(env.recipient)
        if handler is not None:
            handler(env)

    # trace ----------------------------------------------------------------

    def record(self, kind: str, agent: str | None, payload: Any = None, size: int = 0) -> None:
        self.trace.append({"time": _round(self.now), "kind": kind, "agent": agent,
                           "payload": payload, "size": size})

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, default=str) + "\n" for r in self.trace)

    def trace_hash(self) -> str:
        return hashlib.sha256(self.trace_jsonl().encode()).hexdigest()


@dataclass
class _OutLane:
    next_seq: int = 0
    unacked: dict[int, tuple[float, float, Any]] = field(default_factory=dict)

    def floor(self) -> int:
        return min(self.unacked, default=self.next_seq)


@dataclass
class _InLane:
    session: float | None = None
    expected: int = 0
    buffer: dict[int, Any] = field(default_factory=dict)


class ReliableChannel:
    """In-order, duplicate-free delivery to peers over lossy links.

    Unacknowledged messages are resent every ``resend_after`` seconds and
    abandoned after ``give_up`` seconds.  ``session`` identifies one power-on
    of the owner, so a restarted peer starts fresh lanes.
    """

    def __init__(self, session: float, send: Callable[[str, Any], None],
                 resend_after: float = 1.0, give_up: float = 60.0):
        self.session = session
        self._send = send
        self.resend_after = resend_after
        self.give_up = give_up
        self.out: dict[str, _OutLane] = {}
        self.inn: dict[str, _InLane] = {}

    def send(self, peer: str, body: Any, now: float) -> None:
        lane = self.out.setdefault(peer, _OutLane())
        seq = lane.next_seq
        lane.next_seq += 1
        lane.unacked[seq] = (now, now, body)
        self._send(peer, Reliable(self.session, seq, lane.floor(), body))

    def poll(self, now: float) -> None:
        for peer, lane in sorted(self.out.items()):
            for seq, (first, last, body) in sorted(lane.unacked.items()):
                if now - first >= self.give_up - 1e-9:
                    del lane.unacked[seq]
                elif now - last >= self.resend_after - 1e-9:
                    lane.unacked[seq] = (first, now, body)
                    self._send(peer, Reliable(self.session, seq, lane.floor(), body))

    def pending(self) -> int:
        return sum(len(l.unacked) for l in self.out.values())

    def on_message(self, peer: str, msg: Reliable | ReliableAck) -> list[Any]:
        """Handle a wrapper or an ack; returns bodies now deliverable in order."""
        if isinstance(msg, ReliableAck):
            lane = self.out.get(peer)
            if lane is not None and msg.session == self.session:
                lane.unacked.pop(msg.seq, None)
            return []
        self._send(peer, ReliableAck(msg.session, msg.seq))
        lane = self.inn.setdefault(peer, _InLane())
        if lane.session is None or msg.session > lane.session:
            lane.session, lane.expected, lane.buffer = msg.session, msg.floor, {}
        elif msg.session < lane.session:
            return []
        if msg.floor > lane.expected:
            lane.expected = msg.floor
            lane.buffer = {s: b for s, b in lane.buffer.items() if s >= msg.floor}
        if msg.seq >= lane.expected:
            lane.buffer[msg.seq] = msg.body
        out = []
        while lane.expected in lane.buffer:
            out.append(lane.buffer.pop(lane.expected))
            lane.expected += 1
        return out


def full_mesh(agents: Iterable[str], **link_kwargs) -> list[LinkModel]:
    """Links between every pair, with unique static weights in pair order."""
    names = sorted(agents)
    out = []
    w = 1
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            out.append(LinkModel(a, b, weight=float(w), **link_kwargs))
            w += 1
    return out
