"""Line-oriented text format for task networks.

One record per line, fields as ``key=value`` tokens after the record type.
Records appear in this order::

    network name=<text>
    agent <id> role=<rover|base-station>
    var <owner>.<name> kind=<continuous|discrete-flag> units=<u> [lo=<x> hi=<y>] [values=<v,...>]
    task <id> executor=<e> command=<c> duration=<s> priority=<p> start=<s> mode=<m>
         kind=<k> count=<n> [cleanup=<c>] [min_duration=<s>] [parent=<id>]
    constraint <task> scope=<pre-execution|maintenance> locus=<local|multi-agent>
         var=<owner>.<name> (lo=<x> hi=<y> | values=<v,...>)
    constraint <task> scope=precedence after=<id,...> finished=<status,...>
         [waive=<owner>.<name>:<value>]
    impact <task> var=<owner>.<name> kind=<delta-at-start|delta-at-end|linear-rate> amount=<x>

Subtask ``task`` lines carry ``parent=`` and follow their parent.  Blank
lines and ``#`` comments are ignored.  Floats use Python ``repr`` so a
round trip is exact.
"""

from __future__ import annotations

import shlex
from dataclasses import replace

from .model import (
    Constraint,
    Impact,
    ImpactKind,
    Locus,
    Scope,
    StateVariable,
    Status,
    TaskNetwork,
    TaskTemplate,
    VarKind,
    parse_var_label,
    var_label,
)


class ParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def _num(x: float) -> str:
    return repr(float(x))


def _q(s: str) -> str:
    return shlex.quote(s)


def _constraint_line(task_id: str, c: Constraint) -> str:
    if c.scope is Scope.PRECEDENCE:
        parts = [f"constraint {task_id} scope=precedence after={','.join(c.predecessors)}",
                 "finished=" + ",".join(sorted(s.value for s in c.finished))]
        if c.waive_if:
            parts.append(f"waive={var_label(c.waive_if[0])}:{_num(c.waive_if[1])}")
        return " ".join(parts)
    head = (f"constraint {task_id} scope={c.scope.value} locus={c.locus.value} "
            f"var={var_label(c.variable)}")
    if c.values is not None:
        return head + " values=" + ",".join(_num(v) for v in sorted(c.values))
    return head + f" lo={_num(c.low)} hi={_num(c.high)}"


def _task_lines(t: TaskTemplate, parent: str | None) -> list[str]:
    fields = [f"task {t.id}", f"executor={t.executor}", f"command={t.command}",
              f"duration={t.duration}", f"priority={t.priority}",
              f"start={t.preferred_start}", f"mode={t.mode}", f"kind={t.kind or '-'}",
              f"count={t.instance_count}"]
    if t.cleanup:
        fields.append(f"cleanup={t.cleanup}")
    if t.min_duration is not None:
        fields.append(f"min_duration={t.min_duration}")
    if parent:
        fields.append(f"parent={parent}")
    lines = [" ".join(fields)]
    lines += [_constraint_line(t.id, c) for c in t.constraints]
    lines += [f"impact {t.id} var={var_label(i.variable)} kind={i.kind.value} "
              f"amount={_num(i.amount)}" for i in t.impacts]
    for s in t.subtasks:
        lines += _task_lines(s, t.id)
    return lines


def dump_network(net: TaskNetwork) -> str:
    lines = [f"network name={_q(net.name)}"]
    lines += [f"agent {a} role={r}" for a, r in sorted(net.agents.items())]
    for v in net.variables:
        line = f"var {var_label(v.key)} kind={v.kind.value} units={_q(v.units or '-')}"
        if v.bounds is not None:
            line += f" lo={_num(v.bounds[0])} hi={_num(v.bounds[1])}"
        if v.values:
            line += " values=" + ",".join(_num(x) for x in v.values)
        lines.append(line)
    for t in net.tasks:
        lines += _task_lines(t, None)
    return "\n".join(lines) + "\n"


def _kv(tokens: list[str], lineno: int) -> dict[str, str]:
    out = {}
    for tok in tokens:
        k, sep, v = tok.partition("=")
        if not sep:
            raise ParseError(lineno, f"expected key=value, got {tok!r}")
        out[k] = v
    return out


def load_network(text: str) -> TaskNetwork:
    name = ""
    agents: dict[str, str] = {}
    variables: list[StateVariable] = []
    order: list[str] = []
    heads: dict[str, dict] = {}
    parents: dict[str, str] = {}
    cons: dict[str, list[Constraint]] = {}
    imps: dict[str, list[Impact]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            tokens = shlex.split(line)
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
        rec = tokens[0]
        try:
            if rec == "network":
                name = _kv(tokens[1:], lineno).get("name", "")
            elif rec == "agent":
                agents[tokens[1]] = _kv(tokens[2:], lineno)["role"]
            elif rec == "var":
                kv = _kv(tokens[2:], lineno)
                owner, vname = parse_var_label(tokens[1])
                bounds = (float(kv["lo"]), float(kv["hi"])) if "lo" in kv else None
                values = tuple(float(x) for x in kv["values"].split(",")) if "values" in kv else ()
                units = kv.get("units", "")
                variables.append(StateVariable(vname, owner, VarKind(kv["kind"]),
                                               "" if units == "-" else units, bounds, values))
            elif rec == "task":
                tid = tokens[1]
                kv = _kv(tokens[2:], lineno)
                if tid in heads:
                    raise ParseError(lineno, f"duplicate task {tid}")
                for req in ("executor", "command", "duration"):
                    if req not in kv:
                        raise ParseError(lineno, f"task {tid} missing {req}=")
                for num in ("duration", "priority", "start", "count", "min_duration"):
                    if num in kv:
                        int(kv[num])
                heads[tid] = kv
                order.append(tid)
                if "parent" in kv:
                    if kv["parent"] not in heads:
                        raise ParseError(lineno, f"parent {kv['parent']} not defined yet")
                    parents[tid] = kv["parent"]
            elif rec == "constraint":
                tid = tokens[1]
                if tid not in heads:
                    raise ParseError(lineno, f"constraint for undefined task {tid}")
                cons.setdefault(tid, []).append(_parse_constraint(_kv(tokens[2:], lineno)))
            elif rec == "impact":
                tid = tokens[1]
                if tid not in heads:
                    raise ParseError(lineno, f"impact for undefined task {tid}")
                kv = _kv(tokens[2:], lineno)
                imps.setdefault(tid, []).append(Impact(
                    parse_var_label(kv["var"]), ImpactKind(kv["kind"]), float(kv["amount"])))
            else:
                raise ParseError(lineno, f"unknown record type {rec!r}")
        except ParseError:
            raise
        except (KeyError, IndexError) as exc:
            raise ParseError(lineno, f"missing field {exc}") from None
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None

    def build(tid: str) -> TaskTemplate:
        kv = heads[tid]
        subs = tuple(build(s) for s in order if parents.get(s) == tid)
        return TaskTemplate(
            id=tid, executor=kv["executor"], command=kv["command"],
            duration=int(kv["duration"]), priority=int(kv.get("priority", 0)),
            preferred_start=int(kv.get("start", 0)), cleanup=kv.get("cleanup"),
            constraints=tuple(cons.get(tid, ())), impacts=tuple(imps.get(tid, ())),
            subtasks=subs, instance_count=int(kv.get("count", 1)),
            mode=kv.get("mode", "idle"), kind="" if kv.get("kind", "-") == "-" else kv["kind"],
            min_duration=int(kv["min_duration"]) if "min_duration" in kv else None,
            pinned_to_parent=tid in parents)

    tasks = [build(t) for t in order if t not in parents]
    return TaskNetwork(tasks, variables, agents, name=name)


def _parse_constraint(kv: dict[str, str]) -> Constraint:
    scope = Scope(kv["scope"])
    if scope is Scope.PRECEDENCE:
        waive = None
        if "waive" in kv:
            label, _, value = kv["waive"].rpartition(":")
            waive = (parse_var_label(label), float(value))
        return Constraint(scope, predecessors=tuple(kv["after"].split(",")),
                          finished=frozenset(Status(s) for s in kv["finished"].split(",")),
                          waive_if=waive)
    base = Constraint(scope, parse_var_label(kv["var"]), locus=Locus(kv.get("locus", "local")))
    if "values" in kv:
        return replace(base, values=frozenset(float(x) for x in kv["values"].split(",")))
    return replace(base, low=float(kv["lo"]), high=float(kv["hi"]))
