"""Resource models: battery state of charge, CPU temperature and time.

All predictions are piecewise linear.  Battery and temperature rates depend
only on sun angle and the operating mode, never on the current value, so a
replan simply re-seeds the timelines from measured state.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .tasknet.model import Constraint, ImpactKind, VarKey, VarKind, var_label

SUN_BUCKETS: tuple[int, ...] = tuple(range(20, 91, 10))
MODES: tuple[str, ...] = ("idle", "sync", "planning", "driving", "low-power")
HEAT_REUSE_FRACTION = 0.8

# Placeholder coefficients; only the model structure is meaningful.
DEFAULT_MODE_POWER = {"idle": 8.0, "sync": 10.0, "planning": 14.0,
                      "driving": 25.0, "low-power": 1.0}
DEFAULT_SOLAR_POWER = {20: 6.0, 30: 9.0, 40: 12.0, 50: 15.0, 60: 17.0,
                       70: 18.5, 80: 19.5, 90: 20.0}
DEFAULT_HEATER_DEMAND = {20: 14.0, 30: 11.0, 40: 8.0, 50: 5.0, 60: 3.0,
                         70: 1.5, 80: 0.5, 90: 0.0}
_IDLE_TEMP = {20: -1.5, 30: -1.2, 40: -1.0, 50: -0.6, 60: -0.3, 70: 0.0,
              80: 0.3, 90: 0.6}
_DRIVE_TEMP = {20: -0.5, 30: 0.0, 40: 0.5, 50: 1.0, 60: 1.5, 70: 2.5,
               80: 5.0, 90: 6.0}
_MODE_OFFSET = {"idle": 0.0, "sync": 0.2, "planning": 0.8, "low-power": -0.5}


def _default_temp_rates() -> dict[tuple[int, str], float]:
    rates = {}
    for b in SUN_BUCKETS:
        for mode, off in _MODE_OFFSET.items():
            rates[(b, mode)] = _IDLE_TEMP[b] + off
        rates[(b, "driving")] = _DRIVE_TEMP[b]
    return rates


class UnknownBucket(KeyError):
    pass


@dataclass(frozen=True)
class OperatingMode:
    mode: str
    power_load: float

    def __post_init__(self):
        if self.power_load < 0:
            raise ValueError("power load must be non-negative")


@dataclass
class EnvironmentModel:
    """Sun-angle driven environment tables.

    ``temp_rates`` is keyed by ``(bucket, mode)`` in degC per minute; the
    solar and heater tables are watts per 10-degree sun-angle bucket.
    """

    sun_angle: float = 50.0
    battery_capacity_wh: float = 20.0
    solar_power: dict[int, float] = field(default_factory=lambda: dict(DEFAULT_SOLAR_POWER))
    heater_demand: dict[int, float] = field(default_factory=lambda: dict(DEFAULT_HEATER_DEMAND))
    mode_power: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_MODE_POWER))
    temp_rates: dict[tuple[int, str], float] = field(default_factory=_default_temp_rates)

    @property
    def heat_reuse_fraction(self) -> float:
        return HEAT_REUSE_FRACTION

    def bucket(self, angle: float | None = None) -> int:
        a = self.sun_angle if angle is None else angle
        if not SUN_BUCKETS[0] <= a <= SUN_BUCKETS[-1]:
            raise UnknownBucket(f"sun angle {a} outside [20, 90]")
        return int(a // 10 * 10)

    def mode(self, name: str) -> OperatingMode:
        return OperatingMode(name, self.mode_power[name])

    def solar_charge_rate(self) -> float:
        """Solar charging alone, in %SOC per minute."""
        return self.solar_power[self.bucket()] / self.battery_capacity_wh * 100.0 / 60.0

    def validate(self) -> list[str]:
        problems = []
        for b in SUN_BUCKETS:
            if b not in self.solar_power:
                problems.append(f"solar.{b} missing")
            if b not in self.heater_demand:
                problems.append(f"heater.{b} missing")
            for m in self.mode_power:
                if (b, m) not in self.temp_rates:
                    problems.append(f"temp_rate.{b}.{m} missing")
        lowest = min(self.mode_power, key=self.mode_power.get)
        if "low-power" in self.mode_power and self.mode_power[lowest] < self.mode_power["low-power"]:
            problems.append("low-power must have the minimum load")
        return problems

    def to_text(self) -> str:
        lines = [f"sun_angle = {self.sun_angle!r}",
                 f"battery_capacity_wh = {self.battery_capacity_wh!r}"]
        lines += [f"power.{m} = {p!r}" for m, p in self.mode_power.items()]
        lines += [f"solar.{b} = {p!r}" for b, p in sorted(self.solar_power.items())]
        lines += [f"heater.{b} = {p!r}" for b, p in sorted(self.heater_demand.items())]
        lines += [f"temp_rate.{b}.{m} = {r!r}" for (b, m), r in sorted(self.temp_rates.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> EnvironmentModel:
        """Parse ``key = value`` lines; unspecified keys keep their defaults."""
        env = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key = key.strip()
            try:
                num = float(value)
                parts = key.split(".")
                if key == "sun_angle":
                    env.sun_angle = num
                elif key == "battery_capacity_wh":
                    env.battery_capacity_wh = num
                elif key == "heat_reuse_fraction":
                    if num != HEAT_REUSE_FRACTION:
                        raise ValueError("heat reuse fraction is fixed at 0.8")
                elif parts[0] == "power" and len(parts) == 2:
                    env.mode_power[parts[1]] = num
                elif parts[0] == "solar" and len(parts) == 2:
                    env.solar_power[int(parts[1])] = num
                elif parts[0] == "heater" and len(parts) == 2:
                    env.heater_demand[int(parts[1])] = num
                elif parts[0] == "temp_rate" and len(parts) == 3:
                    env.temp_rates[(int(parts[1]), parts[2])] = num
                else:
                    raise ValueError(f"unknown key {key!r}")
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
        return env


def _as_mode(env: EnvironmentModel, mode: OperatingMode | str) -> OperatingMode:
    return env.mode(mode) if isinstance(mode, str) else mode


def soc_rate(env: EnvironmentModel, mode: OperatingMode | str) -> float:
    """Net battery rate in %SOC per second.

    Heater demand is offset by the reusable share of the mode's own load,
    so power-hungry modes reduce the background heater draw.
    """
    m = _as_mode(env, mode)
    b = env.bucket()
    solar = env.solar_power[b]
    heater = max(0.0, env.heater_demand[b] - HEAT_REUSE_FRACTION * m.power_load)
    watts = solar - m.power_load - heater
    return watts / (env.battery_capacity_wh * 3600.0) * 100.0


def temp_rate(env: EnvironmentModel, mode: OperatingMode | str) -> float:
    """CPU heating rate in degC per second (table lookup, minute-based table)."""
    m = _as_mode(env, mode)
    key = (env.bucket(), m.mode)
    if key not in env.temp_rates:
        raise KeyError(f"no temperature rate for bucket {key[0]}, mode {key[1]}")
    return env.temp_rates[key] / 60.0


# ---------------------------------------------------------------------------
# Timelines


@dataclass(frozen=True)
class ScheduledImpact:
    """An impact placed in time: the owning task spans ``[start, end]``."""

    variable: VarKey
    kind: ImpactKind
    amount: float
    start: float
    end: float


@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    value: float
    rate: float

    def at(self, t: float) -> float:
        return self.value + self.rate * (t - self.start)

    @property
    def end_value(self) -> float:
        return self.at(self.end)


@dataclass
class Timeline:
    """Piecewise-linear profile; steps appear as zero-length segments.

    A zero-length segment at ``t`` holds the value just before the step;
    the following segment starts at the value after it.  Evaluation is
    right-continuous.
    """

    variable: VarKey
    segments: list[Segment]
    horizon: float
    final_value: float

    @property
    def start(self) -> float:
        return self.segments[0].start

    def breakpoints(self) -> list[float]:
        pts = sorted({s.start for s in self.segments} | {self.horizon})
        return pts

    def value_at(self, t: float, side: str = "right") -> float:
        if not self.start <= t <= self.horizon:
            raise ValueError(f"t={t} outside timeline [{self.start}, {self.horizon}]")
        if side == "right":
            if t == self.horizon:
                return self.final_value
            starts = [s.start for s in self.segments]
            i = bisect.bisect_right(starts, t) - 1
            while self.segments[i].start == self.segments[i].end:
                i += 1
            return self.segments[i].at(t)
        if t == self.start:
            return self.segments[0].value
        for seg in self.segments:
            if seg.start < t <= seg.end:
                return seg.at(t)
        raise AssertionError("unreachable")

    def extrema(self, t1: float, t2: float) -> tuple[float, float]:
        pts = [self.value_at(t1), self.value_at(t2)]
        for seg in self.segments:
            if seg.start == seg.end:
                if t1 < seg.start <= t2:
                    pts.append(seg.value)
                continue
            for t in (seg.start, seg.end):
                if t1 < t < t2:
                    pts.append(seg.at(t))
        return min(pts), max(pts)


def project_timeline(variable: VarKey, now: float, current_value: float,
                     impacts: Iterable[ScheduledImpact], horizon: float | None = None,
                     background_rate: float = 0.0) -> Timeline:
    """Seed a timeline at ``(now, current_value)`` and apply future impacts.

    Rates of overlapping impacts add up.  Anything that happened before
    ``now`` is assumed to be reflected in ``current_value`` already.
    """
    impacts = list(impacts)
    for imp in impacts:
        if imp.variable != variable:
            raise ValueError(f"impact on {var_label(imp.variable)} projected onto "
                             f"{var_label(variable)}")
    if horizon is None:
        horizon = max([now] + [i.end for i in impacts])
    rate_changes: dict[float, float] = {}
    deltas: dict[float, float] = {}
    rate = background_rate
    for imp in impacts:
        if imp.kind is ImpactKind.RATE:
            lo, hi = max(imp.start, now), min(imp.end, horizon)
            if hi <= lo:
                continue
            if lo == now:
                rate += imp.amount
            else:
                rate_changes[lo] = rate_changes.get(lo, 0.0) + imp.amount
            if hi < horizon:
                rate_changes[hi] = rate_changes.get(hi, 0.0) - imp.amount
        else:
            t = imp.start if imp.kind is ImpactKind.START else imp.end
            if now <= t <= horizon:
                deltas[t] = deltas.get(t, 0.0) + imp.amount
    segments: list[Segment] = []
    value, prev = float(current_value), float(now)
    for t in sorted(set(rate_changes) | set(deltas)):
        if t > prev:
            segments.append(Segment(prev, t, value, rate))
            value += rate * (t - prev)
            prev = t
        d = deltas.get(t, 0.0)
        if d:
            segments.append(Segment(t, t, value, 0.0))
            value += d
        rate += rate_changes.get(t, 0.0)
    if horizon > prev or not segments or segments[-1].start == segments[-1].end:
        segments.append(Segment(prev, horizon, value, rate))
        value += rate * (horizon - prev)
    if abs(rate) < 1e-15:
        rate = 0.0
    return Timeline(variable, segments, float(horizon), value)


@dataclass(frozen=True)
class ConstraintCheck:
    satisfied: bool
    violated_at: float | None = None

    def __bool__(self) -> bool:
        return self.satisfied


def check_constraint_on_timeline(c: Constraint, tl: Timeline, interval: Sequence[float],
                                 tol: float = 1e-9) -> ConstraintCheck:
    """Check a state constraint over a closed interval; report the earliest violation."""
    if c.variable != tl.variable:
        raise ValueError(f"constraint on {c.variable} checked against {tl.variable}")
    t1, t2 = interval
    if t1 > t2 or t1 < tl.start - tol or t2 > tl.horizon + tol:
        raise ValueError(f"interval {interval} outside timeline horizon")
    if t1 == t2:
        v = tl.value_at(t1)
        return ConstraintCheck(True) if c.admits(v, tol) else ConstraintCheck(False, t1)
    lo, hi = c.bounds()
    for i, seg in enumerate(tl.segments):
        if seg.start == seg.end:
            continue
        a, b = max(seg.start, t1), min(seg.end, t2)
        if a > b or (a == b and a != t1):
            continue
        va = seg.at(a)
        if not c.admits(va, tol):
            return ConstraintCheck(False, a)
        if c.values is not None or seg.rate == 0:
            continue
        bound = lo if seg.rate < 0 else hi
        if math.isinf(bound):
            continue
        cross = seg.start + (bound - seg.value) / seg.rate
        vb = seg.at(b)
        if not c.admits(vb, tol) and a <= cross < b:
            return ConstraintCheck(False, cross)
    v2 = tl.value_at(t2)
    if not c.admits(v2, tol):
        return ConstraintCheck(False, t2)
    return ConstraintCheck(True)


def background_rates(network, env: EnvironmentModel) -> dict[VarKey, float]:
    """Idle-mode drift of every planning variable (plus the time clock)."""
    rates: dict[VarKey, float] = {}
    for v in network.variables:
        if v.kind is not VarKind.CONTINUOUS:
            continue
        if v.name == "soc":
            rates[v.key] = soc_rate(env, "idle")
        elif v.name == "cpu_temp":
            rates[v.key] = temp_rate(env, "idle")
        elif v.name == "time":
            rates[v.key] = 1.0
    return rates


def mode_impacts(env: EnvironmentModel, agent: str, mode: str,
                 has_battery: bool = True) -> list:
    """Rate impacts of running ``mode`` relative to idling."""
    from .tasknet.model import Impact

    out = []
    if has_battery:
        d = soc_rate(env, mode) - soc_rate(env, "idle")
        if d:
            out.append(Impact((agent, "soc"), ImpactKind.RATE, d))
    d = temp_rate(env, mode) - temp_rate(env, "idle")
    if d:
        out.append(Impact((agent, "cpu_temp"), ImpactKind.RATE, d))
    return out
