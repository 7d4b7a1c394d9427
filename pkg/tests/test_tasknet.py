import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from roverteam.tasknet import (
    LEADER,
    TEAM,
    TRANSITIONS,
    IllegalTransition,
    Impact,
    ImpactKind,
    InvalidNetwork,
    Locus,
    NetworkConfig,
    NetworkError,
    ParseError,
    Scope,
    StateVariable,
    Status,
    TaskInstance,
    TaskNetwork,
    TaskTemplate,
    after,
    build_exploration_network,
    build_formation_network,
    dump_network,
    expand_instances,
    load_network,
    participation_subsets,
    validate_network,
    within,
)

TEAM3 = {"base": "base-station", "rover1": "rover", "rover2": "rover", "rover3": "rover"}


def team(n):
    return {"base": "base-station", **{f"rover{i}": "rover" for i in range(1, n + 1)}}


# ---------------------------------------------------------------------------
# Exploration builder


def test_exploration_one_cycle_has_fifteen_tasks():
    net = build_exploration_network(TEAM3, cycles=1)
    kinds = [t.kind for t in net.tasks]
    # 3 sync + 1 backup + 1 plan + 3 drive + 3 stop + 4 sleep
    assert len(net.tasks) == 15
    assert {k: kinds.count(k) for k in set(kinds)} == {
        "sync": 3, "backup": 1, "planning": 1, "exploration": 3, "stop": 3, "sleep": 4}
    assert len(expand_instances(net)) == 15


def test_exploration_requires_rovers_and_cycles():
    with pytest.raises(NetworkError):
        build_exploration_network({"base": "base-station"})
    with pytest.raises(NetworkError):
        build_exploration_network(TEAM3, cycles=0)


def test_second_cycle_drive_follows_first_cycle_drive():
    net = build_exploration_network(TEAM3, cycles=2)
    for r in ("rover1", "rover2", "rover3"):
        drive = net.template(f"explore_drive.c1.{r}")
        preds = [c for c in drive.precedences() if f"explore_drive.c0.{r}" in c.predecessors]
        assert len(preds) == 1
        # completed or stopped both release the next drive
        assert {Status.COMPLETED, Status.ABORTED, Status.FAILED} <= preds[0].finished


def test_planning_waits_for_every_sync():
    net = build_exploration_network(TEAM3, cycles=1)
    plan = net.template("explore_plan.c0")
    assert plan.executor == LEADER
    got = {p for c in plan.precedences() for p in c.predecessors}
    assert got == {"sync.c0.rover1", "sync.c0.rover2", "sync.c0.rover3"}


def test_rover_work_is_gated_on_participation():
    net = build_exploration_network(TEAM3, cycles=1)
    for t in net.tasks:
        if t.kind in ("sync", "exploration"):
            flags = [c for c in t.constraints if c.is_state and c.variable[1] == "participating"]
            assert flags and flags[0].values == frozenset({1.0}), t.id


def test_drives_are_guarded_by_battery_and_temperature():
    cfg = NetworkConfig()
    net = build_exploration_network(TEAM3, cycles=1)
    drive = net.template("explore_drive.c0.rover2")
    guards = {c.variable: c.bounds() for c in drive.state_constraints(Scope.MAINTENANCE)}
    assert guards[("rover2", "soc")][0] == cfg.soc_floor == 20.0
    assert guards[("rover2", "cpu_temp")][1] == cfg.temp_limit == 65.0
    assert drive.min_duration == cfg.min_drive_duration


def test_base_station_has_no_battery():
    net = build_exploration_network(TEAM3, cycles=1)
    keys = {v.key for v in net.variables}
    assert ("base", "soc") not in keys
    assert ("base", "cpu_temp") in keys
    sleep = net.template("sleep.base")
    assert all(i.variable[1] != "soc" for i in sleep.impacts)


def test_sleep_precedes_shutdown():
    cfg = NetworkConfig()
    net = build_exploration_network(TEAM3, cycles=1)
    for a in TEAM3:
        s = net.template(f"sleep.{a}")
        assert s.preferred_start + s.duration <= cfg.window - cfg.shutdown_guard


# ---------------------------------------------------------------------------
# Formation builder


def test_formation_seven_parents_per_cycle():
    net = build_formation_network(TEAM3, cycles=2)
    parents = [t for t in net.tasks if t.subtasks]
    assert len(parents) == 14
    for t in parents:
        assert len(t.subtasks) == t.id.split(".")[-1].count("+") + 1


def test_larger_subsets_have_strictly_higher_priority():
    net = build_formation_network(TEAM3, cycles=1)
    parents = [t for t in net.tasks if t.subtasks]
    for a, b in itertools.permutations(parents, 2):
        if len(a.subtasks) > len(b.subtasks):
            assert a.priority > b.priority


def test_single_rover_formation():
    net = build_formation_network(team(1), cycles=1)
    parents = [t for t in net.tasks if t.subtasks]
    assert len(parents) == 1
    p = parents[0]
    assert [s.executor for s in p.subtasks] == ["rover1"]
    multi = [c for c in p.constraints if c.is_state and c.locus is Locus.MULTI]
    assert [c.variable for c in multi] == [(TEAM, "coordinated")]


def test_subset_parent_excludes_other_rovers():
    net = build_formation_network(TEAM3, cycles=1)
    p = net.template("formation.c0.rover1+rover3")
    excl = [c for c in p.state_constraints(Scope.PRE) if c.variable == ("rover2", "participating")]
    assert len(excl) == 1 and excl[0].values == frozenset({0.0})


def test_coordinated_flag_set_at_start_and_watched():
    net = build_formation_network(TEAM3, cycles=1)
    p = net.template("formation.c0.rover1+rover2+rover3")
    starts = [i for i in p.impacts if i.variable == (TEAM, "coordinated")]
    assert any(i.kind is ImpactKind.START and i.amount == 1.0 for i in starts)
    for s in p.subtasks:
        assert s.pinned_to_parent
        watch = [c for c in s.constraints if c.variable == (TEAM, "coordinated")]
        assert watch[0].scope is Scope.MAINTENANCE and watch[0].locus is Locus.MULTI


@pytest.mark.parametrize("n", [1, 2, 3, 4])
@pytest.mark.parametrize("builder", [build_exploration_network, build_formation_network])
def test_generated_networks_validate(builder, n):
    assert validate_network(builder(team(n), cycles=2)).ok


# ---------------------------------------------------------------------------
# Subsets


def test_participation_subsets_order():
    assert participation_subsets(["R3", "R1", "R2"]) == [
        ("R1", "R2", "R3"), ("R1", "R2"), ("R1", "R3"), ("R2", "R3"), ("R1",), ("R2",), ("R3",)]
    assert participation_subsets(["R1"]) == [("R1",)]
    with pytest.raises(NetworkError):
        participation_subsets([])


@given(st.sets(st.text("abcdef", min_size=1, max_size=3), min_size=1, max_size=5))
def test_participation_subsets_enumerates_power_set(members):
    subsets = participation_subsets(list(members))
    assert len(subsets) == 2 ** len(members) - 1
    assert len(set(subsets)) == len(subsets)
    sizes = [len(s) for s in subsets]
    assert sizes == sorted(sizes, reverse=True)


# ---------------------------------------------------------------------------
# Validation


def _net(tasks, variables=()):
    vs = list(variables) or [StateVariable("soc", "a", bounds=(0, 100))]
    return TaskNetwork(tasks, vs, {"a": "rover", "base": "base-station"})


def test_precedence_cycle_is_reported():
    a = TaskTemplate("A", "a", "x", 10, constraints=(after("B"),))
    b = TaskTemplate("B", "a", "x", 10, constraints=(after("A"),))
    report = validate_network(_net([a, b]))
    cycles = [f for f in report.findings if f.kind == "cycle"]
    assert cycles and set(cycles[0].tasks) == {"A", "B"}


def test_dangling_references_are_reported():
    t = TaskTemplate("A", "a", "x", 10, constraints=(after("ghost"), within(("a", "temp"), 0, 1)))
    assert {"dangling"} <= validate_network(_net([t])).kinds()


def test_parent_impacts_must_equal_union_of_subtasks():
    sub = TaskTemplate("P/a", "a", "x", 10, pinned_to_parent=True,
                       impacts=(Impact(("a", "soc"), ImpactKind.RATE, -0.1),))
    good = TaskTemplate("P", "a", "x", 10, subtasks=(sub,), impacts=sub.impacts)
    bad = TaskTemplate("P", "a", "x", 10, subtasks=(sub,),
                       impacts=sub.impacts + sub.impacts)
    assert validate_network(_net([good])).ok
    assert "hierarchy" in validate_network(_net([bad])).kinds()


def test_duplicate_priority_and_id_is_reported():
    t = TaskTemplate("A", "a", "x", 10)
    assert "duplicate" in validate_network(_net([t, t])).kinds()


def test_zero_instance_count_is_rejected():
    t = TaskTemplate("A", "a", "x", 10, instance_count=0)
    with pytest.raises(InvalidNetwork):
        expand_instances(_net([t]))


def test_instance_count_two_gives_two_indices():
    t = TaskTemplate("A", "a", "x", 10, instance_count=2)
    insts = expand_instances(_net([t]))
    assert [(i.id, i.index, i.status) for i in insts] == [
        ("A#0", 0, Status.UNSCHEDULED), ("A#1", 1, Status.UNSCHEDULED)]


# ---------------------------------------------------------------------------
# Status lifecycle


@given(st.sampled_from(list(Status)), st.sampled_from(list(Status)))
def test_status_transitions_follow_the_table(src, dst):
    inst = TaskInstance(TaskTemplate("A", "a", "x", 1), status=src)
    allowed = {
        Status.UNSCHEDULED: {Status.SCHEDULED},
        Status.SCHEDULED: {Status.COMMITTED, Status.UNSCHEDULED},
        Status.COMMITTED: {Status.EXECUTING, Status.DROPPED, Status.FAILED},
        Status.EXECUTING: {Status.COMPLETED, Status.FAILED, Status.ABORTED},
    }.get(src, set())
    assert set(TRANSITIONS[src]) == allowed
    if dst in allowed:
        inst.transition(dst)
        assert inst.status is dst
    else:
        with pytest.raises(IllegalTransition):
            inst.transition(dst)


# ---------------------------------------------------------------------------
# Text format


@pytest.mark.parametrize("builder", [build_exploration_network, build_formation_network])
def test_text_round_trip_is_exact(builder):
    net = builder(TEAM3, cycles=2)
    text = dump_network(net)
    again = load_network(text)
    assert again.tasks == net.tasks
    assert again.variables == net.variables
    assert again.agents == net.agents
    assert dump_network(again) == text


def test_parse_errors_carry_line_numbers():
    text = "network name=x\nagent a role=rover\n\ntask t executor=a command=c duration=oops\n"
    with pytest.raises(ParseError) as err:
        load_network(text)
    assert err.value.lineno == 4
    assert "line 4" in str(err.value)


def test_parse_rejects_unknown_record():
    with pytest.raises(ParseError) as err:
        load_network("# comment\nbogus x\n")
    assert err.value.lineno == 2


def test_parse_rejects_constraint_before_task():
    with pytest.raises(ParseError):
        load_network("constraint t scope=precedence after=a finished=completed\n")
