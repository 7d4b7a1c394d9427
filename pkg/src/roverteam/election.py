"""Periodic leader election.

Every round, the live agents build a minimum spanning tree with the GHS
distributed algorithm.  The smaller-id endpoint of the final core edge is
the appointer: it gathers margin scores over the tree, picks the leader
(with hysteresis) and the designated survivor, and broadcasts the result
back down the tree.

GHS assumes reliable FIFO links, so election traffic runs over a small
sequence-numbered channel with cumulative acks and retransmission.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .messages import LeaderAnnouncement

INF = (math.inf, "", "")
Weight = tuple[float, str, str]

ROUND_PERIOD = 10.0
HYSTERESIS = 0.15


def edge_weight(a: str, b: str, w: float) -> Weight:
    """Unique edge weight: the link weight tie-broken by the endpoint pair."""
    lo, hi = sorted((a, b))
    return (float(w), lo, hi)


# ---------------------------------------------------------------------------
# Scores and selection


@dataclass(frozen=True)
class MarginScore:
    soc_margin: float
    temp_margin: float

    @property
    def score(self) -> float:
        return min(self.soc_margin, self.temp_margin)


def _clamp(x: float) -> float:
    return min(1.0, max(0.0, x))


def margin_score(soc: float | None, temp: float, soc_floor: float = 20.0,
                 temp_limit: float = 65.0, temp_span: float = 45.0) -> MarginScore:
    """Distance from the power and thermal limits, each normalized to [0, 1].

    Agents without a battery (``soc is None``) get a full power margin.
    """
    soc_m = 1.0 if soc is None else _clamp((soc - soc_floor) / (100.0 - soc_floor))
    return MarginScore(soc_m, _clamp((temp_limit - temp) / temp_span))


def select_leader(scores: Mapping[str, float], incumbent: str | None = None,
                  hysteresis: float = HYSTERESIS) -> str:
    if not scores:
        raise ValueError("no candidates")
    candidate = min(scores, key=lambda a: (-scores[a], a))
    if incumbent is not None and incumbent in scores and incumbent != candidate:
        if scores[candidate] - scores[incumbent] < hysteresis:
            return incumbent
    return candidate


def _incumbent(entries: tuple) -> str | None:
    """Leader accepted by most members; ties go to the newer epoch."""
    votes: dict[tuple[int, str], int] = {}
    for *_, ep, ld in entries:
        if ld is not None:
            votes[(ep, ld)] = votes.get((ep, ld), 0) + 1
    if not votes:
        return None
    return max(votes, key=lambda k: (votes[k], k))[1]


def select_survivor(scores: Mapping[str, float], leader: str) -> str | None:
    rest = {a: s for a, s in scores.items() if a != leader}
    if not rest:
        return None
    return min(rest, key=lambda a: (-rest[a], a))


# ---------------------------------------------------------------------------
# GHS


class GHSNode:
    """One node of the GHS minimum spanning tree algorithm.

    ``send(neighbor, (kind, args))`` must deliver reliably and in order per
    link.  ``edges`` maps neighbor ids to unique weights.
    """

    SLEEPING, FIND, FOUND = "sleeping", "find", "found"
    BASIC, BRANCH, REJECTED = "basic", "branch", "rejected"

    def __init__(self, node: str, edges: Mapping[str, Weight],
                 send: Callable[[str, tuple], None]):
        self.id = node
        self.w = dict(edges)
        self.send = send
        self.state = self.SLEEPING
        self.level = 0
        self.fragment: Weight | None = None
        self.se = {j: self.BASIC for j in self.w}
        self.in_branch: str | None = None
        self.best_edge: str | None = None
        self.best_wt: Weight = INF
        self.test_edge: str | None = None
        self.find_count = 0
        self.halted = False
        self.core_peer: str | None = None
        self.deferred: list[tuple[str, tuple]] = []

    def add_edge(self, j: str, weight: Weight) -> None:
        if j not in self.w:
            self.w[j] = weight
            self.se[j] = self.BASIC

    @property
    def branches(self) -> list[str]:
        return sorted(j for j, s in self.se.items() if s == self.BRANCH)

    def wakeup(self) -> None:
        if self.state != self.SLEEPING:
            return
        self.state = self.FOUND
        self.level = 0
        self.find_count = 0
        if not self.w:
            self.halted = True
            return
        m = min(self.w, key=self.w.get)
        self.se[m] = self.BRANCH
        self.send(m, ("connect", 0))

    def receive(self, j: str, msg: tuple) -> None:
        if self.state == self.SLEEPING:
            self.wakeup()
        if not self._handle(j, msg):
            self.deferred.append((j, msg))
            return
        progressed = True
        while progressed and self.deferred:
            progressed = False
            for k, (src, m) in enumerate(self.deferred):
                if self._handle(src, m):
                    del self.deferred[k]
                    progressed = True
                    break

    def _handle(self, j: str, msg: tuple) -> bool:
        kind, *args = msg
        return getattr(self, f"_on_{kind}")(j, *args)

    def _on_connect(self, j: str, level: int) -> bool:
        if level < self.level:
            self.se[j] = self.BRANCH
            self.send(j, ("initiate", self.level, self.fragment, self.state))
            if self.state == self.FIND:
                self.find_count += 1
            return True
        if self.se[j] == self.BASIC:
            return False
        self.send(j, ("initiate", self.level + 1, self.w[j], self.FIND))
        return True

    def _on_initiate(self, j: str, level: int, fragment: Weight, state: str) -> bool:
        self.level, self.fragment, self.state = level, tuple(fragment), state
        self.in_branch = j
        self.best_edge, self.best_wt = None, INF
        for i in sorted(self.se):
            if i != j and self.se[i] == self.BRANCH:
                self.send(i, ("initiate", level, fragment, state))
                if state == self.FIND:
                    self.find_count += 1
        if state == self.FIND:
            self._test()
        return True

    def _test(self) -> None:
        basic = [j for j, s in self.se.items() if s == self.BASIC]
        if basic:
            self.test_edge = min(basic, key=self.w.get)
            self.send(self.test_edge, ("test", self.level, self.fragment))
        else:
            self.test_edge = None
            self._report()

    def _on_test(self, j: str, level: int, fragment: Weight) -> bool:
        if level > self.level:
            return False
        if tuple(fragment) != self.fragment:
            self.send(j, ("accept",))
            return True
        if self.se[j] == self.BASIC:
            self.se[j] = self.REJECTED
        if self.test_edge != j:
            self.send(j, ("reject",))
        else:
            self._test()
        return True

    def _on_accept(self, j: str) -> bool:
        self.test_edge = None
        if self.w[j] < self.best_wt:
            self.best_edge, self.best_wt = j, self.w[j]
        self._report()
        return True

    def _on_reject(self, j: str) -> bool:
        if self.se[j] == self.BASIC:
            self.se[j] = self.REJECTED
        self._test()
        return True

    def _report(self) -> None:
        if self.find_count == 0 and self.test_edge is None:
            self.state = self.FOUND
            self.send(self.in_branch, ("report", self.best_wt))

    def _on_report(self, j: str, weight: Weight) -> bool:
        weight = tuple(weight)
        if j != self.in_branch:
            self.find_count -= 1
            if weight < self.best_wt:
                self.best_wt, self.best_edge = weight, j
            self._report()
            return True
        if self.state == self.FIND:
            return False
        if weight > self.best_wt:
            self._change_root()
        elif weight == self.best_wt == INF:
            self.halted = True
            self.core_peer = j
        return True

    def _change_root(self) -> None:
        if self.se[self.best_edge] == self.BRANCH:
            self.send(self.best_edge, ("changeroot",))
        else:
            self.send(self.best_edge, ("connect", self.level))
            self.se[self.best_edge] = self.BRANCH

    def _on_changeroot(self, j: str) -> bool:
        self._change_root()
        return True


def kruskal(nodes, edges: Mapping[tuple[str, str], Weight]) -> set[frozenset[str]]:
    """Sequential minimum spanning forest, used as a reference."""
    parent = {n: n for n in nodes}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    out = set()
    for (a, b), _ in sorted(edges.items(), key=lambda kv: kv[1]):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            out.add(frozenset((a, b)))
    return out


# ---------------------------------------------------------------------------
# Reliable FIFO channel for election traffic


@dataclass(frozen=True)
class ElectionWire:
    round: tuple[int, int]
    seq: int
    body: tuple

    @property
    def kind(self) -> str:
        return self.body[0]


@dataclass(frozen=True)
class ElectionAck:
    round: tuple[int, int]
    upto: int


@dataclass
class _Lane:
    next_out: int = 0
    unacked: dict[int, tuple[float, tuple]] = field(default_factory=dict)
    expected: int = 0
    buffer: dict[int, tuple] = field(default_factory=dict)
    resent: set[int] = field(default_factory=set)


# ---------------------------------------------------------------------------
# Election orchestration


@dataclass
class ElectionConfig:
    round_period: float = ROUND_PERIOD
    round_offset: float = 1.0
    retry_after: float = 4.0
    heartbeat_timeout: float = 2.0
    retransmit_after: float = 0.5
    stall_after: float = 30.0
    max_round_age: float = 60.0
    hysteresis: float = HYSTERESIS


@dataclass
class RoundRecord:
    round: tuple[int, int]
    started: float
    appointer: str | None = None
    leader: str | None = None
    survivor: str | None = None
    epoch: int | None = None
    scores: dict[str, float] = field(default_factory=dict)
    mst: list[str] = field(default_factory=list)
    completed: float | None = None


class ElectionNode:
    """Per-agent election state machine, driven by the host's clock and inbox.

    Host duties: call :meth:`start_round` at each round boundary, :meth:`poll`
    periodically (retransmission and stall retries), :meth:`heard` for any
    traffic from a neighbor, and route :class:`ElectionWire` /
    :class:`ElectionAck` messages to :meth:`on_message`.
    """

    def __init__(self, agent: str, weights: Mapping[str, float],
                 send: Callable[[str, object], None],
                 score: Callable[[], float], eligible: bool = True,
                 config: ElectionConfig | None = None,
                 on_announce: Callable[[LeaderAnnouncement], None] | None = None,
                 clock: Callable[[], float] = lambda: 0.0):
        self.agent = agent
        self.clock = clock
        self.weights = dict(weights)
        self._send = send
        self.score = score
        self.eligible = eligible
        self.config = config or ElectionConfig()
        self.on_announce = on_announce
        self.last_heard: dict[str, float] = {}
        self.round: tuple[int, int] | None = None
        self.ghs: GHSNode | None = None
        self.lanes: dict[str, _Lane] = {}
        self.accepted: LeaderAnnouncement | None = None
        self.completed_round: tuple[int, int] | None = None
        self.history: list[RoundRecord] = []
        self._parent: str | None = None
        self._waiting: set[str] = set()
        self._gathered: dict[str, tuple] = {}
        self._gather_started = False
        self._round_started = 0.0
        self._last_progress = 0.0
        self._deferred: int | None = None
        self._created = clock()
        self._srtt: dict[str, float] = {}

    # liveness ---------------------------------------------------------------

    def heard(self, peer: str, now: float) -> None:
        self.last_heard[peer] = now

    def alive_neighbors(self, now: float) -> list[str]:
        return sorted(p for p in self.weights
                      if now - self.last_heard.get(p, -math.inf) <= self.config.heartbeat_timeout)

    @property
    def epoch(self) -> int:
        return -1 if self.accepted is None else self.accepted.epoch

    @property
    def leader(self) -> str | None:
        return None if self.accepted is None else self.accepted.leader

    # round control ------------------------------------------------------------

    def start_round(self, number: int, now: float, attempt: int = 0) -> None:
        rid = (number, attempt)
        if self.round is not None and rid <= self.round:
            return
        if attempt == 0 and (self._progressing(now) or self._warming_up(now)):
            # Let a slow but live round finish (or the first heartbeats
            # arrive); the new round starts from poll() afterwards.
            self._deferred = number
            return
        self._deferred = None
        self._begin(rid, now)
        self.ghs.wakeup()
        self._after_ghs_step(now)

    def _progressing(self, now: float) -> bool:
        cfg = self.config
        return (self.round is not None and self.completed_round != self.round
                and not self._membership_changed(now)
                and now - self._last_progress < cfg.stall_after - 1e-9
                and now - self._round_started < cfg.max_round_age - 1e-9)

    def _warming_up(self, now: float) -> bool:
        """Some neighbor not heard from yet, shortly after start-up."""
        return (not set(self.weights) <= set(self.last_heard)
                and now - self._created < 2 * self.config.heartbeat_timeout - 1e-9)

    def _membership_changed(self, now: float) -> bool:
        return self.ghs is not None and set(self.alive_neighbors(now)) != set(self.ghs.w)

    def _rto(self, peer: str) -> float:
        """Retransmission timeout: twice the smoothed round trip, floored."""
        return max(self.config.retransmit_after, 2.0 * self._srtt.get(peer, 0.0))

    def _begin(self, rid: tuple[int, int], now: float) -> None:
        self.round = rid
        self._round_started = now
        self._last_progress = now
        self.lanes = {}
        edges = {p: edge_weight(self.agent, p, self.weights[p]) for p in self.alive_neighbors(now)}
        self.ghs = GHSNode(self.agent, edges, lambda j, m: self._ghs_send(j, m))
        self._parent = None
        self._waiting = set()
        self._gathered = {}
        self._gather_started = False
        self.history.append(RoundRecord(rid, now))

    def poll(self, now: float) -> None:
        """Retransmit unacked traffic and retry a stalled round."""
        for peer, lane in sorted(self.lanes.items()):
            rto = self._rto(peer)
            for seq, (sent, body) in sorted(lane.unacked.items()):
                if now - sent >= rto - 1e-9:
                    lane.unacked[seq] = (now, body)
                    lane.resent.add(seq)
                    self._send(peer, ElectionWire(self.round, seq, body))
        if (self._deferred is not None and not self._progressing(now)
                and not self._warming_up(now)):
            self.start_round(self._deferred, now)
            return
        if self.round is None or self.completed_round == self.round:
            return
        number, attempt = self.round
        cfg = self.config
        base = cfg.round_offset + number * cfg.round_period
        due = self._round_started + cfg.retry_after
        stalled = (self._membership_changed(now)
                   or now - self._last_progress >= cfg.stall_after - 1e-9)
        fits = now + cfg.retry_after <= base + cfg.round_period + 1e-9
        if now >= due - 1e-9 and stalled and fits:
            self.start_round(number, now, attempt + 1)

    # transport ----------------------------------------------------------------

    def _ghs_send(self, peer: str, body: tuple) -> None:
        self._wire_send(peer, ("ghs",) + (body,))

    def _wire_send(self, peer: str, body: tuple) -> None:
        lane = self.lanes.setdefault(peer, _Lane())
        seq = lane.next_out
        lane.next_out += 1
        lane.unacked[seq] = (self.clock(), body)
        self._send(peer, ElectionWire(self.round, seq, body))

    def on_message(self, peer: str, msg: object, now: float) -> None:
        self.heard(peer, now)
        if isinstance(msg, ElectionAck):
            if msg.round == self.round and peer in self.lanes:
                lane = self.lanes[peer]
                for s in [s for s in lane.unacked if s <= msg.upto]:
                    sent, _ = lane.unacked.pop(s)
                    if s not in lane.resent:  # Karn: time only first transmissions
                        sample = now - sent
                        old = self._srtt.get(peer)
                        self._srtt[peer] = sample if old is None else 0.875 * old + 0.125 * sample
            return
        if not isinstance(msg, ElectionWire):
            return
        if self.round is None or msg.round > self.round:
            self._deferred = None
            self._begin(msg.round, now)
            self.ghs.wakeup()
        if msg.round != self.round:
            return
        if peer not in self.ghs.w and peer in self.weights:
            self.ghs.add_edge(peer, edge_weight(self.agent, peer, self.weights[peer]))
        lane = self.lanes.setdefault(peer, _Lane())
        if msg.seq >= lane.expected:
            lane.buffer[msg.seq] = msg.body
        while lane.expected in lane.buffer:
            self._last_progress = now
            body = lane.buffer.pop(lane.expected)
            lane.expected += 1
            self._dispatch(peer, body, now)
        self._send(peer, ElectionAck(self.round, lane.expected - 1))

    def _dispatch(self, peer: str, body: tuple, now: float) -> None:
        kind = body[0]
        if kind == "ghs":
            self.ghs.receive(peer, body[1])
            self._after_ghs_step(now)
        elif kind == "gather":
            self._on_gather(peer, now)
        elif kind == "scores":
            self._gathered[peer] = body[1]
            self._waiting.discard(peer)
            self._maybe_report(now)
        elif kind == "announce":
            self._on_announce(LeaderAnnouncement(*body[1]), peer, now)

    # convergecast --------------------------------------------------------------

    def _my_entry(self) -> tuple:
        acc = self.accepted
        return ((self.agent, float(self.score()), self.eligible,
                 -1 if acc is None else acc.epoch, None if acc is None else acc.leader),)

    def _after_ghs_step(self, now: float) -> None:
        g = self.ghs
        if not g.halted or self._gather_started:
            return
        if g.core_peer is None or self.agent < g.core_peer:
            self._gather_started = True
            self._parent = None
            self._start_gather(now)

    def _start_gather(self, now: float) -> None:
        children = [j for j in self.ghs.branches if j != self._parent]
        self._waiting = set(children)
        for j in children:
            self._wire_send(j, ("gather",))
        self._maybe_report(now)

    def _on_gather(self, peer: str, now: float) -> None:
        self._gather_started = True
        self._parent = peer
        self._start_gather(now)

    def _maybe_report(self, now: float) -> None:
        if self._waiting:
            return
        entries = self._my_entry() + tuple(e for j in sorted(self._gathered)
                                           for e in self._gathered[j])
        if self._parent is not None:
            self._wire_send(self._parent, ("scores", entries))
            return
        self._appoint(entries, now)

    def _appoint(self, entries: tuple, now: float) -> None:
        number, attempt = self.round
        scores = {a: s for a, s, ok, _, _ in entries if ok}
        members = tuple(sorted(a for a, *_ in entries))
        incumbent = _incumbent(entries)
        if not scores:
            return
        leader = select_leader(scores, incumbent if incumbent in scores else None,
                               self.config.hysteresis)
        survivor = select_survivor(scores, leader)
        prev = {(ep, ld) for *_, ep, ld in entries}
        if len(prev) == 1 and next(iter(prev))[1] == leader:
            epoch = next(iter(prev))[0]
        else:
            epoch = number * 10 + min(attempt, 9)
        ann = LeaderAnnouncement(number * 10 + min(attempt, 9), leader, survivor, epoch,
                                 self.agent, members)
        rec = self.history[-1]
        rec.appointer, rec.leader, rec.survivor, rec.epoch = self.agent, leader, survivor, epoch
        rec.scores = dict(scores)
        self._on_announce(ann, None, now)

    def _on_announce(self, ann: LeaderAnnouncement, peer: str | None, now: float) -> None:
        for j in self.ghs.branches:
            if j != peer:
                self._wire_send(j, ("announce", (ann.round, ann.leader, ann.survivor,
                                                 ann.epoch, ann.appointer, ann.members)))
        self.completed_round = self.round
        rec = self.history[-1]
        rec.completed = now
        rec.mst = self.ghs.branches
        if rec.leader is None:
            rec.appointer, rec.leader, rec.survivor, rec.epoch = (
                ann.appointer, ann.leader, ann.survivor, ann.epoch)
        self.accept(ann)

    def accept(self, ann: LeaderAnnouncement) -> bool:
        """Adopt an announcement unless it is older than the current one."""
        cur = self.accepted
        if cur is not None and (ann.epoch < cur.epoch or
                                (ann.epoch == cur.epoch and ann.round < cur.round)):
            return False
        self.accepted = ann
        if self.on_announce is not None:
            self.on_announce(ann)
        return True
