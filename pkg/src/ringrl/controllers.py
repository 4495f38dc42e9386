"""Baseline controllers sharing the dual-ring state machine.

Every controller exposes ``reset(env)`` and ``decide(env) -> action`` and only
ever returns a member of ``env.feasible_actions()``.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import signal_core as sc
from .od_demand import MOVEMENTS, PHASE_MOVEMENT, OdMatrix

# ring rotation per barrier side: (first, second)
_ROTATION = {
    (1, 1): (1, 2), (1, 2): (5, 6),
    (2, 1): (3, 4), (2, 2): (7, 8),
}


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ActuatedParams:
    passage_time: tuple[float, ...] = (3.0,) * 8
    max_green: tuple[float, ...] = tuple(t.max_green for t in sc.default_timings())
    detection: Mapping[str, bool] = field(default_factory=lambda: {m: True for m in MOVEMENTS})

    def __post_init__(self):
        if len(self.passage_time) != 8 or len(self.max_green) != 8:
            raise ValueError("passage_time and max_green need one value per phase")
        if any(p <= 0 for p in self.passage_time):
            raise ValueError("passage_time must be positive")

    @classmethod
    def from_grid(cls, through_max: float, left_max: float, passage: float = 3.0) -> "ActuatedParams":
        mg = tuple(left_max if PHASE_MOVEMENT[p].endswith("L") else through_max for p in sc.PHASES)
        return cls((passage,) * 8, mg)

    def validate(self, timings) -> None:
        for p, (mx, t) in enumerate(zip(self.max_green, timings), start=1):
            if mx < t.min_green:
                raise ConfigurationError(f"phase {p}: max_green {mx} < min_green {t.min_green}")

    def to_json(self) -> dict:
        return {"passage_time": list(self.passage_time), "max_green": list(self.max_green),
                "detection": dict(self.detection)}

    @classmethod
    def from_json(cls, doc: Mapping) -> "ActuatedParams":
        base = cls()
        return cls(tuple(float(x) for x in doc.get("passage_time", base.passage_time)),
                   tuple(float(x) for x in doc.get("max_green", base.max_green)),
                   dict(doc.get("detection", base.detection)))


def _pair_action(p1: int, p2: int) -> int:
    return sc.PAIR_ACTION[(p1, p2)]


def actuated_decide(state: sc.ControllerState, detectors: Mapping[str, tuple[int, float]],
                    params: ActuatedParams) -> int:
    """Gap-out / max-out logic with ring rotation and call skipping.

    ``detectors`` maps movement -> (vehicles waiting at the stop bar, time of the
    last stop-bar actuation).
    """
    clock = state.clock
    side = sc.side_of(state.ring1.target)

    def call(p):
        mv = PHASE_MOVEMENT[p]
        return params.detection.get(mv, True) and detectors[mv][0] > 0

    def demand(p):
        mv = PHASE_MOVEMENT[p]
        if not params.detection.get(mv, True):
            return False
        waiting, last = detectors[mv]
        return waiting > 0 or clock - last < params.passage_time[p - 1] - 1e-9

    status = {}
    for ring_no, r in ((1, state.ring1), (2, state.ring2)):
        if not r.terminable:
            status[ring_no] = ("fixed", r.target, False)
            continue
        p = r.active_phase
        first, second = _ROTATION[(side, ring_no)]
        partner = second if p == first else first
        maxed = sc.green_elapsed(r, state.timings) >= params.max_green[p - 1] - 1e-9
        if not maxed and demand(p):
            status[ring_no] = ("stay", p, False)
        elif p == first and call(partner):
            status[ring_no] = ("switch", partner, maxed)
        else:
            status[ring_no] = ("done", p, maxed)

    other_side = 2 if side == 1 else 1
    cross_calls = any(call(p) for p in sc.PHASES if sc.side_of(p) == other_side)

    def crossing_pair():
        pair = []
        for ring_no in (1, 2):
            first, second = _ROTATION[(other_side, ring_no)]
            pair.append(first if call(first) else second)
        return _pair_action(*pair)

    s1, s2 = status[1], status[2]
    both_done = s1[0] == "done" and s2[0] == "done"
    if both_done and (cross_calls or s1[2] or s2[2]):
        return crossing_pair()

    phases = []
    for ring_no in (1, 2):
        kind, p, maxed = status[ring_no]
        if kind == "done" and maxed:
            other = status[2 if ring_no == 1 else 1]
            first, second = _ROTATION[(side, ring_no)]
            partner = second if p == first else first
            if not call(partner) and other[0] != "fixed":
                return crossing_pair()
            p = partner  # re-serve the compatible phase rather than overrun max green
        elif kind == "switch":
            pass
        phases.append(p)
    return _pair_action(*phases)


class ActuatedController:
    name = "actuated"

    def __init__(self, params: ActuatedParams | None = None):
        self.params = params or ActuatedParams()

    def reset(self, env) -> None:
        self.params.validate(env.timings)

    def decide(self, env) -> int:
        return actuated_decide(env.state, env.detector_state(), self.params)


@dataclass(frozen=True)
class FixedPlan:
    entries: tuple[tuple[int, float], ...]

    def validate(self, timings) -> None:
        if not self.entries:
            raise ConfigurationError("fixed plan is empty")
        for a, split in self.entries:
            p1, p2 = sc.action_phases(a)
            need = max(timings[p1 - 1].min_green, timings[p2 - 1].min_green)
            if split < need:
                raise ConfigurationError(f"split {split} for action {a} below min green {need}")
            if abs(split - round(split)) > 1e-9:
                raise ConfigurationError("fixed splits must be whole seconds")

    def to_json(self) -> list:
        return [[a, s] for a, s in self.entries]

    @classmethod
    def from_json(cls, doc) -> "FixedPlan":
        return cls(tuple((int(a), float(s)) for a, s in doc))


def fixed_plan_from_volumes(volumes, timings=None, sat_flow: float = 1900.0,
                            lanes: Mapping[str, int] | None = None) -> FixedPlan:
    """Four-stage Webster plan {1,5} {2,6} {3,7} {4,8} sized from movement volumes."""
    from .od_demand import DEFAULT_LANES
    timings = sc.default_timings() if timings is None else timings
    lanes = DEFAULT_LANES if lanes is None else lanes
    stages = (1, 4, 5, 8)

    def y(p):
        mv = PHASE_MOVEMENT[p]
        return volumes[mv] / (sat_flow * lanes[mv])

    ys = [max(y(p1), y(p2)) for p1, p2 in (sc.ACTION_PAIRS[a] for a in stages)]
    big_y = min(sum(ys), 0.95)
    lost = sum(timings[0].yellow + timings[0].red_clearance for _ in stages)
    cycle = min(max((1.5 * lost + 5) / (1 - big_y), 60.0), 150.0)
    total_y = sum(ys) or 1.0
    entries = []
    for a, yi in zip(stages, ys):
        p1, p2 = sc.ACTION_PAIRS[a]
        need = max(timings[p1 - 1].min_green, timings[p2 - 1].min_green)
        g = max(need, math.ceil((cycle - lost) * yi / total_y))
        entries.append((a, float(g)))
    return FixedPlan(tuple(entries))


class FixedTimeController:
    name = "fixed"

    def __init__(self, plan: FixedPlan):
        self.plan = plan
        self.index = 0
        self.started = False

    def reset(self, env) -> None:
        self.plan.validate(env.timings)
        pair = env.state.active_pair()
        actions = [a for a, _ in self.plan.entries]
        start = sc.PAIR_ACTION[pair]
        # join the cycle at the starting pair when the plan serves it
        self.index = actions.index(start) if start in actions else 0
        self.started = start in actions

    def decide(self, env) -> int:
        s = env.state
        a, split = self.plan.entries[self.index]
        if not self.started:
            if a not in env.feasible_actions():
                return sc.PAIR_ACTION[s.active_pair()]
            self.started = True
        p1, p2 = sc.action_phases(a)
        if s.active_pair() == (p1, p2) and s.ring1.in_green and s.ring2.in_green:
            served = min(sc.green_elapsed(s.ring1, s.timings), sc.green_elapsed(s.ring2, s.timings))
            if served >= split - 1e-9:
                self.index = (self.index + 1) % len(self.plan.entries)
                a = self.plan.entries[self.index][0]
        if a not in env.feasible_actions():
            raise ConfigurationError(f"fixed plan action {a} infeasible at t={s.clock}")
        return a


class RandomFeasibleController:
    name = "random"

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reset(self, env) -> None:
        pass

    def decide(self, env) -> int:
        return random_feasible_decide(env.feasible_actions(), self.rng)


def random_feasible_decide(feasible: Sequence[int], rng: np.random.Generator) -> int:
    return int(feasible[rng.integers(len(feasible))])


def run_controller(env, controller, scenario: OdMatrix, seed: int, check=None):
    """Run one full episode of ``env`` under ``controller``; returns the env."""
    env.reset(scenario, seed)
    controller.reset(env)
    terminal = False
    while not terminal:
        a = controller.decide(env)
        if check is not None:
            check(env, a)
        _, _, terminal, _ = env.step(a)
    return env


def intersection_delay(env, start: float, end: float) -> float:
    """Vehicle-weighted mean delay of all vehicles exiting within the window."""
    st = env.movement_statistics(start, end)
    n = sum(st[m]["n"] for m in MOVEMENTS)
    return sum(st[m]["sum"] for m in MOVEMENTS) / n if n else 0.0


DEFAULT_THROUGH_GRID = (20.0, 30.0, 40.0, 50.0, 60.0)
DEFAULT_LEFT_GRID = (15.0, 20.0, 25.0, 30.0)


def _eval_grid_point(args):
    from .traffic_sim import IntersectionEnv
    through, left, scenario, seeds, env_kwargs, warmup = args
    params = ActuatedParams.from_grid(through, left)
    env = IntersectionEnv(**env_kwargs)
    vals = []
    for seed in seeds:
        run_controller(env, ActuatedController(params), scenario, seed)
        vals.append(intersection_delay(env, warmup, env.horizon))
    return float(np.mean(vals))


def tune_actuated(scenario: OdMatrix, through_grid: Sequence[float] = DEFAULT_THROUGH_GRID,
                  left_grid: Sequence[float] = DEFAULT_LEFT_GRID, seeds: Sequence[int] = range(5),
                  env_kwargs: Mapping | None = None, warmup: float = 900.0,
                  workers: int = 1, csv_path=None) -> tuple[ActuatedParams, list[dict]]:
    """Grid-search max greens minimising mean intersection delay over ``seeds``.

    Ties go to the lexicographically smallest (through, left) point.
    """
    points = sorted(itertools.product(through_grid, left_grid))
    if not points:
        raise ValueError("empty tuning grid")
    env_kwargs = dict(env_kwargs or {})
    env_kwargs.setdefault("horizon", 3600.0)
    timings = env_kwargs.get("timings") or sc.default_timings()
    for th, lf in points:
        ActuatedParams.from_grid(th, lf).validate(timings)
    jobs = [(th, lf, scenario, list(seeds), env_kwargs, warmup) for th, lf in points]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            delays = list(pool.map(_eval_grid_point, jobs))
    else:
        delays = [_eval_grid_point(j) for j in jobs]
    rows = [{"through_max": th, "left_max": lf, "mean_delay_s": d}
            for (th, lf), d in zip(points, delays)]
    best = min(range(len(points)), key=lambda i: (delays[i], points[i]))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["through_max", "left_max", "mean_delay_s"])
            w.writeheader()
            w.writerows(rows)
    return ActuatedParams.from_grid(*points[best]), rows
