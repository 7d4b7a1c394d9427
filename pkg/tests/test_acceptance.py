"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line so the suite output doubles as the
acceptance report.
"""

import random
import time

import pytest

from harness import sync_trial
from oracles import brute_force_schedule, instances, prim_mst, random_connected_graph, \
    random_problem, run_ghs
from roverteam import audit
from roverteam.matrix import BEHAVIORS, ROWS, cell_fault, run_cell, run_matrix
from roverteam.mission import FaultSpec, Scenario, Simulation, default_team
from roverteam.scheduler import StateSnapshot, plan_priority_insertion

TERMINAL = ("aborted", "failed", "completed")


@pytest.fixture
def verdict(capsys):
    def say(number: int, title: str, ok: bool, detail: str = "") -> None:
        with capsys.disabled():
            print(f"\ncriterion {number:>2} {title}: {'PASS' if ok else 'FAIL'}"
                  + (f" ({detail})" if detail else ""))
    return say


def run(scen: Scenario, seed: int):
    r = Simulation(scen, seed=seed).run()
    return r, audit.executions(r.trace)


# ---------------------------------------------------------------------------


def test_leader_loss_recovers_within_one_round_and_round_trip(verdict):
    rng = random.Random(2024)
    worst, slowest, problems = 0.0, 0.0, []
    for seed in range(50):
        kill_at = round(rng.uniform(20.0, 1450.0), 3)
        scen = Scenario(name="leader-kill", agents=default_team(3), duration=kill_at + 40.0,
                        kills=[{"time": kill_at, "agent": "base"}])
        t0 = time.perf_counter()
        r, _ = run(scen, seed)
        slowest = max(slowest, time.perf_counter() - t0)
        bound = audit.idle_bound(audit.scenario_info(r.trace))
        rec = audit.recovery_times(r.trace)
        if len(rec) != 1 or rec[0]["idle"] is None or rec[0]["idle"] > bound:
            problems.append((seed, kill_at, rec))
        else:
            worst = max(worst, rec[0]["idle"])
    ok = not problems and slowest < 60.0
    verdict(1, "leader-loss recovery", ok,
            f"worst idle {worst:.2f}s, bound {bound:.2f}s, slowest run {slowest:.1f}s")
    assert problems == []
    assert slowest < 60.0


def test_commits_are_never_unscheduled_and_sent_inside_the_window(verdict):
    rng = random.Random(77)
    cells = [(r, b) for r in ROWS for b in r.behaviors]
    problems = []
    for seed in range(100):
        r, behavior = rng.choice(cells)
        scen = Scenario(name="commit-audit", mission=r.mission, agents=default_team(3))
        scen.faults = [cell_fault(r, behavior, ["rover1", "rover2", "rover3"])]
        if seed % 4 == 1:
            scen.drop = 0.1
        if seed % 4 == 3:
            scen.kills = [{"time": round(rng.uniform(30.0, 1200.0), 3), "agent": "base"}]
        result, _ = run(scen, seed)
        problems += [f"seed {seed}: {p}" for p in audit.commit_audit(result.trace)]
    verdict(2, "commit semantics", not problems, f"{len(problems)} problems in 100 runs")
    assert problems == []


def test_fault_matrix_passes_with_the_documented_exclusions(verdict):
    t0 = time.perf_counter()
    report = run_matrix()
    elapsed = time.perf_counter() - t0
    skipped = {(c.row, c.behavior) for c in report.cells if c.status == "skip"}
    # Sync always goes first, so it cannot start late; Stop and Sleep have
    # fixed durations and never fail.
    expected = {("SSDB Sync", "starts-late")} | {
        (label, b) for label in ("Stop", "Sleep") for b in ("runs-late", "ends-early", "fails")}
    failed = [f"{c.row} x {c.behavior}: {c.detail}" for c in report.cells if c.status == "fail"]
    ok = report.passed and skipped == expected and elapsed < 300.0
    verdict(3, "fault matrix", ok,
            f"{len(report.cells) - len(skipped)} cells run, {len(skipped)} skipped, "
            f"{elapsed:.0f}s")
    assert failed == []
    assert skipped == expected
    assert len(report.cells) == len(ROWS) * len(BEHAVIORS)
    assert elapsed < 300.0


def _failure_arrival(trace: list[dict], task: str) -> float | None:
    """First delivery of the failure report for ``task`` to any agent."""
    ids = set()
    for rec in audit.of_kind(trace, "send"):
        msg = rec["payload"]["msg"]
        if msg["type"] != "Reliable":
            continue
        body = msg["body"]
        if body.get("task_id") == task and body.get("status") == "failed":
            ids.add(rec["payload"]["id"])
    times = [rec["time"] for rec in audit.of_kind(trace, "deliver")
             if rec["payload"]["id"] in ids and rec["agent"] == "base"]
    return min(times, default=None)


def _formation_run(latency: float, drop: float, rover: str, seed: int):
    scen = Scenario(name="formation-abort", mission="formation", agents=default_team(3),
                    latency=latency, drop=drop,
                    faults=[FaultSpec("formation", "fails", 30.0, agent=rover, cycle=0)])
    r, ex = run(scen, seed)
    subtasks = [e for e in ex.values() if e.window == 0 and e.task.startswith("formation.c0.")]
    return scen, r, subtasks


def test_siblings_abort_within_one_tick_and_two_latencies(verdict):
    worst_slack, problems = float("inf"), []
    for i, latency in enumerate((0.2, 0.5, 1.0, 1.5, 2.0)):
        rover = f"rover{i % 3 + 1}"
        scen, r, subtasks = _formation_run(latency, 0.0, rover, seed=i)
        failing = [e for e in subtasks if e.agent == rover]
        siblings = [e for e in subtasks if e.agent != rover]
        if r.warnings or len(failing) != 1 or failing[0].status != "failed" or len(siblings) != 2:
            problems.append((latency, "scenario did not produce one failed subtask"))
            continue
        arrival = _failure_arrival(r.trace, failing[0].task)
        bound = arrival + 1.0 + 2.0 * (scen.latency + scen.jitter)
        for e in siblings:
            if e.status != "aborted" or e.end > bound + 1e-6:
                problems.append((latency, e.agent, e.status, e.end, bound))
            else:
                worst_slack = min(worst_slack, bound - e.end)
    live = []
    for seed in range(6):
        latency = (0.2, 1.0)[seed % 2]
        _, r, subtasks = _formation_run(latency, 0.3, "rover2", seed=100 + seed)
        states = sorted((e.agent, e.status) for e in subtasks)
        live.append(not r.warnings and len(subtasks) == 3
                    and all(s in TERMINAL for _, s in states)
                    and ("rover2", "failed") in states)
    ok = not problems and all(live)
    verdict(4, "coordinated abort", ok,
            f"smallest slack {worst_slack:.2f}s; lossy runs terminated {sum(live)}/{len(live)}")
    assert problems == []
    assert all(live)


def test_nominal_runs_respect_resource_limits(verdict):
    bad = []
    for seed in range(100):
        mission = ("exploration", "formation")[seed % 2]
        r, _ = run(Scenario(name="nominal", mission=mission, agents=default_team(3)), seed)
        found = (audit.execution_violations(r.trace) + audit.limit_breaches(r.trace, 20.0, 65.0)
                 + audit.interrupted(r.trace))
        if found:
            bad.append((seed, found[:3]))
    verdict(5, "resource safety", not bad, f"{len(bad)} of 100 runs with problems")
    assert bad == []


def test_greedy_planner_matches_brute_force(verdict):
    t0 = time.perf_counter()
    mismatches = []
    for seed in range(200):
        p = random_problem(random.Random(50_000 + seed))
        plan = plan_priority_insertion(instances(p), StateSnapshot(0, dict(p.seeds)), p.window,
                                       background=p.background)
        expected, rejected = brute_force_schedule(p)
        got = {e.id: (e.start, e.end) for e in plan.entries.values()}
        if got != expected or sorted(plan.rejected) != rejected:
            mismatches.append(seed)
    elapsed = time.perf_counter() - t0
    verdict(6, "scheduler oracle equivalence", not mismatches and elapsed < 120.0,
            f"{len(mismatches)} mismatches, {elapsed:.1f}s")
    assert mismatches == []
    assert elapsed < 120.0


def test_ghs_matches_sequential_mst(verdict):
    t0 = time.perf_counter()
    wrong = []
    for seed in range(500):
        rng = random.Random(90_000 + seed)
        nodes, edges = random_connected_graph(rng)
        tree, _ = run_ghs(nodes, edges, rng)
        if tree != prim_mst(nodes, edges):
            wrong.append(seed)
    elapsed = time.perf_counter() - t0
    verdict(7, "GHS correctness", not wrong and elapsed < 60.0,
            f"{len(wrong)} mismatches, {elapsed:.1f}s")
    assert wrong == []
    assert elapsed < 60.0


def test_leader_and_survivor_converge_after_healing(verdict):
    late = []
    for seed in range(200):
        trial = sync_trial(10_000 + seed)
        if trial.converged_at is None or trial.converged_at > trial.heal + 20.0:
            late.append(seed)
    verdict(8, "SSDB convergence", not late, f"{200 - len(late)}/200 within 20s of healing")
    assert late == []


def test_runs_and_matrix_cells_are_deterministic(verdict):
    scenarios = [
        Scenario(name="nominal", agents=default_team(3)),
        Scenario(name="lossy-formation", mission="formation", agents=default_team(3), drop=0.2,
                 faults=[FaultSpec("formation", "fails", 30.0, agent="rover1", cycle=0)]),
        Scenario(name="kill", agents=default_team(3), duration=400.0,
                 kills=[{"time": 200.0, "agent": "base"}]),
    ]
    differ = []
    for i, scen in enumerate(scenarios):
        a = Simulation(Scenario.from_dict(scen.to_dict()), seed=i).run().trace_hash
        b = Simulation(Scenario.from_dict(scen.to_dict()), seed=i).run().trace_hash
        if a != b:
            differ.append(scen.name)
    for label, behavior in (("Formation", "fails"), ("Exploration", "runs-late"),
                            ("Sleep", "starts-late")):
        if run_cell(label, behavior).trace_hash != run_cell(label, behavior).trace_hash:
            differ.append(f"{label} x {behavior}")
    verdict(9, "determinism", not differ, f"{len(differ)} differing traces")
    assert differ == []


BLACKOUT = (20.0, 80.0)


def _stale_scenario(two_way: bool) -> Scenario:
    """rover2 heats past its limit while the leader cannot hear it for 60 s."""
    start, end = BLACKOUT
    scen = Scenario(name="stale-rover", agents=default_team(3),
                    perturbations=[{"time": 26.0, "agent": "rover2", "variable": "cpu_temp",
                                    "value": 70.0}])
    if two_way:
        scen.link_overrides = [{"a": "rover2", "b": p, "blackouts": [[start, end]]}
                               for p in ("base", "rover1", "rover3")]
    else:
        scen.mutes = [{"agent": "rover2", "start": start, "end": end}]
    return scen


def test_stale_plans_are_refused_by_the_rover(verdict):
    results = {}
    for two_way in (False, True):
        r, ex = run(_stale_scenario(two_way), seed=3)
        # Drives committed after the overheat but before the blackout lifts
        # were planned from stale data. Later commits use fresh readings.
        hot = [e for e in ex.values() if e.agent == "rover2" and e.window == 0
               and 26.0 <= e.first_seen < BLACKOUT[1] and e.task.startswith("explore_drive")]
        results[two_way] = (audit.execution_violations(r.trace), hot)
    violations = results[False][0] + results[True][0]
    # With outgoing traffic blacked out the leader keeps planning on stale data,
    # and the commit reaches the rover, whose pre-check must refuse it.
    refused = [e for e in results[False][1]
               if e.status == "failed" and e.reason == "pre:rover2.cpu_temp" and e.start is None]
    # Fully cut off, the rover never runs a drive it cannot sustain.
    ran_hot = [e for e in results[True][1] if e.start is not None and e.start < BLACKOUT[1]]
    ok = not violations and len(refused) == len(results[False][1]) >= 1 and not ran_hot
    verdict(10, "staleness safety", ok,
            f"{len(refused)} stale commits refused, {len(violations)} violations")
    assert violations == []
    assert refused and len(refused) == len(results[False][1])
    assert ran_hot == []
