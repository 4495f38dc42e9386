"""Eight-phase dual-ring/barrier controller state machine.

Ring 1 runs phases 1-4, ring 2 runs phases 5-8.  Phases 1, 2, 5, 6 sit on
barrier side 1 (east-west street) and 3, 4, 7, 8 on side 2.  An action picks
one phase per ring from the same side; the controller then decides how long
the choice stays in force before the next decision is possible.

States are immutable; every transition returns a new ``ControllerState``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Mapping

import numpy as np

from .od_demand import MOVEMENTS, PHASE_MOVEMENT

PHASES = tuple(range(1, 9))
ACTION_PAIRS = {
    1: (1, 5), 2: (1, 6), 3: (2, 5), 4: (2, 6),
    5: (3, 7), 6: (3, 8), 7: (4, 7), 8: (4, 8),
}
PAIR_ACTION = {pair: a for a, pair in ACTION_PAIRS.items()}
N_ACTIONS = 8

UNIT_EXTENSION = 1.0
TIME_RESOLUTION = 0.5
_EPS = 1e-9

# lefts conflict with the opposing through; everything across the barrier conflicts
_LEFT_OPPOSING = {("EBL", "WBT"), ("WBL", "EBT"), ("NBL", "SBT"), ("SBL", "NBT")}
_EW = {"EBL", "EBT", "WBL", "WBT"}


def movements_conflict(a: str, b: str) -> bool:
    if (a in _EW) != (b in _EW):
        return True
    return (a, b) in _LEFT_OPPOSING or (b, a) in _LEFT_OPPOSING


class ContractViolation(RuntimeError):
    """An operation was called outside its precondition (e.g. an infeasible action)."""


class InvalidActionError(ValueError):
    pass


class Interval(IntEnum):
    MIN_GREEN = 0
    EXT_GREEN = 1
    YELLOW = 2
    RED_CLEAR = 3


class Signal(IntEnum):
    RED = 0
    YELLOW = 1
    GREEN = 2


GREEN_INTERVALS = (Interval.MIN_GREEN, Interval.EXT_GREEN)
CLEARANCE_INTERVALS = (Interval.YELLOW, Interval.RED_CLEAR)


def ring_of(phase: int) -> int:
    return 1 if phase <= 4 else 2


def side_of(phase: int) -> int:
    return 1 if phase in (1, 2, 5, 6) else 2


def action_phases(a: int) -> tuple[int, int]:
    try:
        return ACTION_PAIRS[int(a)]
    except (KeyError, TypeError, ValueError):
        raise InvalidActionError(f"action must be in 1..8, got {a!r}") from None


@dataclass(frozen=True)
class PhaseTiming:
    min_green: float
    yellow: float
    red_clearance: float
    max_green: float

    def __post_init__(self):
        for name in ("min_green", "yellow", "red_clearance", "max_green"):
            val = getattr(self, name)
            if not val > 0:
                raise ValueError(f"{name} must be positive, got {val}")
            if abs(val / TIME_RESOLUTION - round(val / TIME_RESOLUTION)) > 1e-9:
                raise ValueError(f"{name}={val} is not a multiple of {TIME_RESOLUTION} s")
        if self.max_green < self.min_green:
            raise ValueError("max_green must be >= min_green")


def default_timings(through_min: float = 8.0, left_min: float = 5.0,
                    yellow: float = 3.5, red: float = 1.5,
                    through_max: float = 40.0, left_max: float = 25.0) -> tuple[PhaseTiming, ...]:
    out = []
    for p in PHASES:
        if PHASE_MOVEMENT[p].endswith("L"):
            out.append(PhaseTiming(left_min, yellow, red, left_max))
        else:
            out.append(PhaseTiming(through_min, yellow, red, through_max))
    return tuple(out)


def timings_from_config(doc: Mapping | None) -> tuple[PhaseTiming, ...]:
    """Parse ``phase_timings``: keys "1".."8" (missing phases keep defaults)."""
    base = list(default_timings())
    for key, spec in (doc or {}).items():
        p = int(key)
        if p not in PHASES:
            raise ValueError(f"unknown phase {key!r} in phase_timings")
        cur = base[p - 1]
        base[p - 1] = PhaseTiming(
            float(spec.get("min_green", cur.min_green)),
            float(spec.get("yellow", cur.yellow)),
            float(spec.get("red_clearance", cur.red_clearance)),
            float(spec.get("max_green", cur.max_green)),
        )
    return tuple(base)


def timings_to_config(timings) -> dict:
    return {str(p): {"min_green": t.min_green, "yellow": t.yellow,
                     "red_clearance": t.red_clearance, "max_green": t.max_green}
            for p, t in zip(PHASES, timings)}


@dataclass(frozen=True)
class RingState:
    active_phase: int
    interval: Interval = Interval.MIN_GREEN
    elapsed: float = 0.0
    committed_phase: int | None = None

    @property
    def in_clearance(self) -> bool:
        return self.interval in CLEARANCE_INTERVALS

    @property
    def in_green(self) -> bool:
        return self.interval in GREEN_INTERVALS

    @property
    def terminable(self) -> bool:
        return self.interval == Interval.EXT_GREEN

    @property
    def target(self) -> int:
        return self.committed_phase if self.committed_phase is not None else self.active_phase


@dataclass(frozen=True)
class ControllerState:
    ring1: RingState
    ring2: RingState
    clock: float = 0.0
    timings: tuple[PhaseTiming, ...] = default_timings()

    @property
    def rings(self) -> tuple[RingState, RingState]:
        return self.ring1, self.ring2

    def timing(self, phase: int) -> PhaseTiming:
        return self.timings[phase - 1]

    def active_pair(self) -> tuple[int, int]:
        return self.ring1.active_phase, self.ring2.active_phase

    def with_rings(self, r1: RingState, r2: RingState, clock: float | None = None) -> "ControllerState":
        return replace(self, ring1=r1, ring2=r2, clock=self.clock if clock is None else clock)


def initial_state(timings=None, action: int = 4) -> ControllerState:
    """Both rings starting min green on the given pair (default {2,6})."""
    p1, p2 = action_phases(action)
    return ControllerState(RingState(p1), RingState(p2), 0.0,
                           default_timings() if timings is None else tuple(timings))


def interval_duration(r: RingState, timings) -> float:
    t = timings[r.active_phase - 1]
    if r.interval == Interval.MIN_GREEN:
        return t.min_green
    if r.interval == Interval.YELLOW:
        return t.yellow
    if r.interval == Interval.RED_CLEAR:
        return t.red_clearance
    return math.inf


def green_elapsed(r: RingState, timings) -> float:
    if r.interval == Interval.MIN_GREEN:
        return r.elapsed
    if r.interval == Interval.EXT_GREEN:
        return timings[r.active_phase - 1].min_green + r.elapsed
    return 0.0


def _ring_accepts(r: RingState, phase: int) -> bool:
    if r.in_clearance:
        return phase == r.committed_phase
    return phase == r.active_phase or r.terminable


def feasible_actions(s: ControllerState) -> tuple[int, ...]:
    out = []
    for a, (p1, p2) in ACTION_PAIRS.items():
        if not (_ring_accepts(s.ring1, p1) and _ring_accepts(s.ring2, p2)):
            continue
        if side_of(p1) != side_of(s.ring1.target):
            # barrier crossing: both rings must be able to terminate now
            if not (s.ring1.terminable and s.ring2.terminable):
                continue
        out.append(a)
    return tuple(out)


def feasible_mask(s: ControllerState) -> np.ndarray:
    mask = np.zeros(N_ACTIONS, dtype=bool)
    for a in feasible_actions(s):
        mask[a - 1] = True
    return mask


def ring_timestep(r: RingState, timings) -> float:
    """Time until this ring next reaches a point where a decision can matter."""
    if r.interval == Interval.MIN_GREEN:
        return timings[r.active_phase - 1].min_green - r.elapsed
    if r.interval == Interval.EXT_GREEN:
        return UNIT_EXTENSION
    t = timings[r.active_phase - 1]
    nxt = timings[r.committed_phase - 1].min_green
    if r.interval == Interval.YELLOW:
        return (t.yellow - r.elapsed) + t.red_clearance + nxt
    return (t.red_clearance - r.elapsed) + nxt


def controller_timestep(s: ControllerState) -> float:
    return min(ring_timestep(s.ring1, s.timings), ring_timestep(s.ring2, s.timings))


def apply_action(s: ControllerState, a: int) -> ControllerState:
    p1, p2 = action_phases(a)
    if a not in feasible_actions(s):
        raise ContractViolation(f"action {a} {ACTION_PAIRS[a]} infeasible in state {s}")
    rings = []
    for r, p in ((s.ring1, p1), (s.ring2, p2)):
        if r.in_clearance or p == r.active_phase:
            rings.append(r)
        else:
            rings.append(RingState(r.active_phase, Interval.YELLOW, 0.0, p))
    return s.with_rings(*rings)


def _crossing(r: RingState) -> bool:
    return r.committed_phase is not None and side_of(r.committed_phase) != side_of(r.active_phase)


def _held(r: RingState, timings) -> bool:
    """Red clearance finished but waiting for the other ring at the barrier."""
    return (r.interval == Interval.RED_CLEAR and _crossing(r)
            and r.elapsed >= interval_duration(r, timings) - _EPS)


def _time_to_boundary(r: RingState, timings) -> float:
    if r.interval == Interval.EXT_GREEN or _held(r, timings):
        return math.inf
    return interval_duration(r, timings) - r.elapsed


def _resolve(r: RingState, other: RingState, timings) -> RingState:
    """Fire the transitions due for ``r`` at the current instant."""
    while True:
        dur = interval_duration(r, timings)
        if r.elapsed < dur - _EPS:
            return r
        if r.interval == Interval.MIN_GREEN:
            r = RingState(r.active_phase, Interval.EXT_GREEN, 0.0, None)
        elif r.interval == Interval.YELLOW:
            r = RingState(r.active_phase, Interval.RED_CLEAR, 0.0, r.committed_phase)
        elif r.interval == Interval.RED_CLEAR:
            if _crossing(r):
                if not _held(other, timings):
                    return RingState(r.active_phase, r.interval, dur, r.committed_phase)
            r = RingState(r.committed_phase, Interval.MIN_GREEN, 0.0, None)
        else:
            return r


def advance(s: ControllerState, dt: float) -> tuple[ControllerState, dict]:
    """Run the controller forward by ``dt`` seconds without a new decision."""
    if dt < 0:
        raise ContractViolation("dt must be nonnegative")
    if dt > controller_timestep(s) + _EPS:
        raise ContractViolation(
            f"dt={dt} skips a decision point (timestep {controller_timestep(s)})")
    r1, r2, clock = s.ring1, s.ring2, s.clock
    remaining = float(dt)
    timings = s.timings
    r1, r2 = _resolve(r1, r2, timings), _resolve(r2, r1, timings)
    while remaining > _EPS:
        step = min(remaining, _time_to_boundary(r1, timings), _time_to_boundary(r2, timings))
        if step > 0:
            if not _held(r1, timings):
                r1 = replace(r1, elapsed=r1.elapsed + step)
            if not _held(r2, timings):
                r2 = replace(r2, elapsed=r2.elapsed + step)
            clock += step
            remaining -= step
        # both rings are checked against the pre-transition partner so a
        # simultaneous barrier crossing releases both together
        n1 = _resolve(r1, r2, timings)
        n2 = _resolve(r2, r1, timings)
        r1, r2 = n1, n2
    out = s.with_rings(r1, r2, clock)
    return out, indications(out)


def indications(s: ControllerState) -> dict:
    out = {m: Signal.RED for m in MOVEMENTS}
    for r in s.rings:
        mv = PHASE_MOVEMENT[r.active_phase]
        if r.in_green:
            out[mv] = Signal.GREEN
        elif r.interval == Interval.YELLOW:
            out[mv] = Signal.YELLOW
    return out


def green_movements(s: ControllerState) -> list[str]:
    return [PHASE_MOVEMENT[r.active_phase] for r in s.rings if r.in_green]


def signal_state_vector(s: ControllerState) -> np.ndarray:
    vec = np.zeros(8)
    for r in s.rings:
        if r.in_green:
            vec[r.active_phase - 1] = green_elapsed(r, s.timings)
    return vec


def conflicting_greens(s: ControllerState) -> list[tuple[str, str]]:
    g = green_movements(s)
    return [(a, b) for i, a in enumerate(g) for b in g[i + 1:] if movements_conflict(a, b)]
