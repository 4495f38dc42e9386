"""Shared oracles for the test suite."""

from __future__ import annotations

import numpy as np

from ringrl import signal_core as sc
from ringrl.od_demand import PHASE_MOVEMENT


def rule_table_timestep(s: sc.ControllerState) -> float:
    """Brute-force reference: min over rings of the per-interval rule."""
    vals = []
    for r in (s.ring1, s.ring2):
        t = s.timings[r.active_phase - 1]
        if r.interval == sc.Interval.MIN_GREEN:
            vals.append(t.min_green - r.elapsed)
        elif r.interval == sc.Interval.EXT_GREEN:
            vals.append(1.0)
        else:
            nxt = s.timings[r.committed_phase - 1].min_green
            if r.interval == sc.Interval.YELLOW:
                vals.append(t.yellow - r.elapsed + t.red_clearance + nxt)
            else:
                vals.append(t.red_clearance - r.elapsed + nxt)
    return min(vals)


def _half_steps(rng, upper, inclusive=False):
    n = int(round(upper / 0.5))
    return 0.5 * int(rng.integers(0, n + 1 if inclusive else max(n, 1)))


def random_timings(rng) -> tuple[sc.PhaseTiming, ...]:
    out = []
    for _ in range(8):
        mn = 0.5 * int(rng.integers(2, 30))
        out.append(sc.PhaseTiming(mn, 0.5 * int(rng.integers(4, 10)),
                                  0.5 * int(rng.integers(1, 6)), mn + 0.5 * int(rng.integers(0, 80))))
    return tuple(out)


def random_controller_state(rng) -> sc.ControllerState:
    """Construct a reachable state directly rather than by simulation."""
    timings = random_timings(rng) if rng.random() < 0.5 else sc.default_timings()
    side = int(rng.integers(1, 3))
    ring_phases = {1: {1: (1, 2), 2: (3, 4)}, 2: {1: (5, 6), 2: (7, 8)}}
    crossing = rng.random() < 0.3
    rings = []
    if crossing:
        # both rings entered yellow together; each follows its own clearance
        chosen = [int(rng.choice(ring_phases[ring][side])) for ring in (1, 2)]
        tau_max = max(timings[p - 1].yellow + timings[p - 1].red_clearance for p in chosen)
        tau = 0.5 * int(rng.integers(0, int(tau_max / 0.5)))
        for ring, p in zip((1, 2), chosen):
            q = int(rng.choice(ring_phases[ring][3 - side]))
            t = timings[p - 1]
            if tau < t.yellow:
                rings.append(sc.RingState(p, sc.Interval.YELLOW, tau, q))
            else:
                rings.append(sc.RingState(p, sc.Interval.RED_CLEAR,
                                          min(tau - t.yellow, t.red_clearance), q))
        return sc.ControllerState(rings[0], rings[1], float(rng.integers(0, 7200)) * 0.5, timings)
    for ring in (1, 2):
        p = int(rng.choice(ring_phases[ring][side]))
        t = timings[p - 1]
        kind = int(rng.integers(0, 4))
        if kind == 0:
            rings.append(sc.RingState(p, sc.Interval.MIN_GREEN, _half_steps(rng, t.min_green)))
        elif kind == 1:
            rings.append(sc.RingState(p, sc.Interval.EXT_GREEN, _half_steps(rng, 60.0, True)))
        else:
            q = [x for x in ring_phases[ring][side] if x != p][0]
            if kind == 2:
                rings.append(sc.RingState(p, sc.Interval.YELLOW, _half_steps(rng, t.yellow), q))
            else:
                rings.append(sc.RingState(p, sc.Interval.RED_CLEAR, _half_steps(rng, t.red_clearance), q))
    return sc.ControllerState(rings[0], rings[1], float(rng.integers(0, 7200)) * 0.5, timings)


class SignalAudit:
    """Tracks interval durations while a controller is advanced in fine steps."""

    def __init__(self, state: sc.ControllerState):
        self.timings = state.timings
        self.conflicts = 0
        self.min_green_violations = 0
        self.yellow_errors = 0
        self.red_errors = 0
        self.greens: list[tuple[int, float]] = []
        self._open = {}
        self.observe(state)

    def observe(self, s: sc.ControllerState) -> None:
        if sc.conflicting_greens(s):
            self.conflicts += 1
        for k, r in enumerate(s.rings):
            colour = "G" if r.in_green else ("Y" if r.interval == sc.Interval.YELLOW else "R")
            key = (r.active_phase, colour)
            cur = self._open.get(k)
            if cur is None or cur[0] != key:
                if cur is not None:
                    self._close(cur[0], s.clock - cur[1])
                self._open[k] = (key, s.clock)

    def _close(self, key, duration) -> None:
        phase, colour = key
        t = self.timings[phase - 1]
        if colour == "G":
            self.greens.append((phase, duration))
            if duration < t.min_green - 1e-9:
                self.min_green_violations += 1
        elif colour == "Y" and abs(duration - t.yellow) > 1e-9:
            self.yellow_errors += 1
        elif colour == "R" and abs(duration - t.red_clearance) > 1e-9:
            self.red_errors += 1

    def advance(self, s: sc.ControllerState, dt: float, quantum: float = 0.5) -> sc.ControllerState:
        done = 0.0
        while done < dt - 1e-9:
            h = min(quantum, dt - done)
            s, _ = sc.advance(s, h)
            done += h
            self.observe(s)
        return s

    @property
    def clean(self) -> bool:
        return not (self.conflicts or self.min_green_violations or self.yellow_errors or self.red_errors)


def drive_random(seed: int, steps: int, timings=None) -> SignalAudit:
    rng = np.random.default_rng(seed)
    s = sc.initial_state(timings)
    audit = SignalAudit(s)
    for _ in range(steps):
        feas = sc.feasible_actions(s)
        a = int(feas[rng.integers(len(feas))])
        s = sc.apply_action(s, a)
        audit.observe(s)
        s = audit.advance(s, sc.controller_timestep(s))
    return audit


__all__ = ["rule_table_timestep", "random_controller_state", "SignalAudit", "drive_random", "verdict",
           "PHASE_MOVEMENT"]


# acceptance verdicts, filled by test_acceptance and printed by conftest
ACCEPTANCE: dict[int, dict[str, tuple[bool, str]]] = {}


def verdict(criterion: int, ok: bool, detail: str, part: str = "") -> bool:
    ACCEPTANCE.setdefault(criterion, {})[part] = (bool(ok), detail)
    return bool(ok)
