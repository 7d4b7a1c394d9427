import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import prim_mst, random_connected_graph, run_ghs
from roverteam.election import (
    ElectionConfig,
    ElectionNode,
    kruskal,
    margin_score,
    select_leader,
    select_survivor,
)
from roverteam.messages import LeaderAnnouncement
from roverteam.netsim import LinkModel, Simulator


# ---------------------------------------------------------------------------
# Scores and selection


def test_margin_score_is_the_smaller_margin():
    s = margin_score(60.0, 40.0)
    assert s.soc_margin == pytest.approx(0.5)
    assert s.temp_margin == pytest.approx(25 / 45)
    assert s.score == pytest.approx(0.5)


def test_battery_free_agent_has_full_power_margin():
    assert margin_score(None, 20.0).soc_margin == 1.0


def test_margins_clamp_to_unit_interval():
    assert margin_score(10.0, 80.0).score == 0.0
    assert margin_score(100.0, -50.0).temp_margin == 1.0


def test_hysteresis_keeps_incumbent_within_margin():
    scores = {"a": 0.60, "b": 0.70}
    assert select_leader(scores, incumbent="a") == "a"
    assert select_leader({"a": 0.50, "b": 0.70}, incumbent="a") == "b"
    assert select_leader(scores) == "b"


def test_exact_hysteresis_gap_switches():
    assert select_leader({"a": 0.25, "b": 0.50}, incumbent="a", hysteresis=0.25) == "b"


def test_ties_go_to_smallest_id():
    assert select_leader({"b": 0.5, "a": 0.5}) == "a"
    assert select_survivor({"a": 0.9, "b": 0.3, "c": 0.3}, "a") == "b"
    assert select_survivor({"a": 0.9}, "a") is None


# ---------------------------------------------------------------------------
# GHS against sequential oracles


@pytest.mark.parametrize("seed", range(60))
def test_ghs_matches_prim(seed):
    rng = random.Random(seed)
    nodes, edges = random_connected_graph(rng)
    tree, ghs = run_ghs(nodes, edges, rng)
    assert tree == prim_mst(nodes, edges)
    assert len(tree) == len(nodes) - 1
    halted = [n for n, g in ghs.items() if g.halted]
    assert len(halted) == 2  # both ends of the final core edge


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_kruskal_agrees_with_prim(seed):
    from roverteam.election import edge_weight

    nodes, edges = random_connected_graph(random.Random(seed))
    w = {k: edge_weight(*k, v) for k, v in edges.items()}
    assert kruskal(nodes, w) == prim_mst(nodes, edges)


def test_two_node_graph():
    tree, _ = run_ghs(["x", "y"], {("x", "y"): 3.0}, random.Random(0))
    assert tree == {frozenset(("x", "y"))}


# ---------------------------------------------------------------------------
# Full election rounds over the simulated network


def election_net(scores, weights, drop=0.0, seed=0, latency=0.2):
    sim = Simulator(seed, [LinkModel(a, b, latency=latency, jitter=0.05, drop=drop, weight=w)
                           for (a, b), w in weights.items()])
    nodes = {}
    accepted = {a: [] for a in scores}
    for a in scores:
        w = {}
        for (x, y), wt in weights.items():
            if a in (x, y):
                w[y if x == a else x] = wt
        nodes[a] = ElectionNode(
            a, w, lambda dst, m, a=a: sim.send(a, dst, m), lambda a=a: scores[a],
            config=ElectionConfig(), on_announce=accepted[a].append, clock=lambda: sim.now)
        sim.register(a, lambda env, a=a: nodes[a].on_message(env.sender, env.payload, sim.now))
    for a in scores:
        for b in nodes[a].weights:
            nodes[a].heard(b, 0.0)
    return sim, nodes, accepted


def run_round(sim, nodes, number, until, dead=()):
    start = 1.0 + 10 * number
    sim.run(start)
    live = {a: n for a, n in nodes.items() if a not in dead}
    for n in live.values():
        for p in n.weights:
            n.heard(p, start)
        n.start_round(number, start)
    t = start
    while t < until:
        t = round(t + 0.5, 6)
        sim.run(t)
        for n in live.values():
            for p in n.weights:  # periodic heartbeats keep live links alive
                if p not in dead:
                    n.heard(p, t)
            n.poll(t)


def test_round_elects_best_score_and_agrees():
    scores = {"base": 0.9, "r1": 0.6, "r2": 0.7}
    weights = {("base", "r1"): 1.0, ("base", "r2"): 2.0, ("r1", "r2"): 3.0}
    sim, nodes, acc = election_net(scores, weights)
    run_round(sim, nodes, 0, 10.0)
    anns = {a: v[-1] for a, v in acc.items()}
    assert {a.leader for a in anns.values()} == {"base"}
    assert {a.survivor for a in anns.values()} == {"r2"}
    assert len({a.epoch for a in anns.values()}) == 1
    rec = nodes["base"].history[-1]
    assert rec.completed is not None and rec.completed - rec.started < 2.0


@pytest.mark.parametrize("seed", range(6))
def test_lossy_links_reach_agreement_within_a_few_rounds(seed):
    # A lossy round may overrun its period; the next round restarts cleanly.
    scores = {"a": 0.5, "b": 0.8, "c": 0.2, "d": 0.4}
    weights = {("a", "b"): 1.0, ("b", "c"): 2.0, ("c", "d"): 3.0, ("a", "d"): 4.0}
    sim, nodes, acc = election_net(scores, weights, drop=0.3, seed=seed)
    for number in range(6):
        run_round(sim, nodes, number, 10.5 + 10 * number)
        if all(acc.values()) and len({(v[-1].leader, v[-1].epoch) for v in acc.values()}) == 1:
            break
    assert all(acc.values())
    assert {v[-1].leader for v in acc.values()} == {"b"}
    assert len({v[-1].epoch for v in acc.values()}) == 1


def test_incumbent_survives_small_challenge_across_rounds():
    scores = {"a": 0.8, "b": 0.6}
    weights = {("a", "b"): 1.0}
    sim, nodes, acc = election_net(scores, weights)
    run_round(sim, nodes, 0, 10.0)
    first = acc["a"][-1]
    assert first.leader == "a"
    scores["b"] = 0.9  # better, but by less than the hysteresis
    run_round(sim, nodes, 1, 20.0)
    second = acc["a"][-1]
    assert second.leader == "a" and second.epoch == first.epoch
    scores["b"] = 0.99
    scores["a"] = 0.5
    run_round(sim, nodes, 2, 30.0)
    third = acc["b"][-1]
    assert third.leader == "b" and third.epoch > first.epoch


def test_older_announcements_are_ignored():
    node = ElectionNode("a", {}, lambda *_: None, lambda: 0.5)
    assert node.accept(LeaderAnnouncement(20, "x", None, 20, "x"))
    assert not node.accept(LeaderAnnouncement(10, "y", None, 10, "y"))
    assert node.leader == "x" and node.epoch == 20


def test_alive_neighbors_expire_after_timeout():
    node = ElectionNode("a", {"b": 1.0, "c": 2.0}, lambda *_: None, lambda: 0.5)
    node.heard("b", 10.0)
    node.heard("c", 7.0)
    assert node.alive_neighbors(10.0) == ["b", "c"] or node.alive_neighbors(10.0) == ["b"]
    assert node.alive_neighbors(9.0 + node.config.heartbeat_timeout) == ["b"]


def test_dead_neighbor_triggers_retry_within_the_round():
    scores = {"a": 0.9, "b": 0.6, "c": 0.7}
    weights = {("a", "b"): 1.0, ("b", "c"): 2.0, ("a", "c"): 3.0}
    sim, nodes, acc = election_net(scores, weights)
    run_round(sim, nodes, 0, 10.0)
    assert acc["b"][-1].leader == "a"
    sim.crash("a")
    # Round 1 starts believing "a" is alive; heartbeats from it stop at once.
    for n in nodes.values():
        n.heard("a", 11.0)
    run_round(sim, nodes, 1, 20.0, dead={"a"})
    for agent in ("b", "c"):
        last = acc[agent][-1]
        assert last.leader == "c" and last.members == ("b", "c")
    rec = nodes["b"].history[-1]
    assert rec.round == (1, 1) and rec.completed < 20.0
