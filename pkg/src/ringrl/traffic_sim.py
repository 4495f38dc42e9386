"""Mesoscopic single-intersection simulator and RL environment.

Vehicles travel the approach at free-flow speed and then wait in a point
queue at the stop bar.  A lane discharges only under green, one vehicle per
saturation headway, and a queue that was standing at green onset pays a
start-up lost time first.  Vehicles leave the system once they cross the bar.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import signal_core as sc
from .od_demand import DEFAULT_LANES, MOVEMENTS, ArrivalStream, OdMatrix, generate_arrivals

# observation lane order: EB 2 through + left, WB 2 through + left, NB, SB
LANES = (
    ("EBT", 0), ("EBT", 1), ("EBL", 0),
    ("WBT", 0), ("WBT", 1), ("WBL", 0),
    ("NBT", 0), ("NBL", 0),
    ("SBT", 0), ("SBL", 0),
)
N_LANES = len(LANES)
OBS_DIM = N_LANES + 8
MOVEMENT_LANES = {m: tuple(i for i, (mv, _) in enumerate(LANES) if mv == m) for m in MOVEMENTS}
_MOVE_IDX = {m: k for k, m in enumerate(MOVEMENTS)}
_LANE_MOVE = np.array([_MOVE_IDX[mv] for mv, _ in LANES])


@dataclass(frozen=True)
class LinkGeometry:
    length: float = 300.0
    speed: float = 13.9
    lanes: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_LANES))

    def __post_init__(self):
        if not self.length > 0 or not self.speed > 0:
            raise ValueError("approach length and speed must be positive")
        if dict(self.lanes) != DEFAULT_LANES:
            raise ValueError(f"lane layout is fixed by the intersection: {DEFAULT_LANES}")

    @property
    def free_flow_time(self) -> float:
        return self.length / self.speed


@dataclass(frozen=True)
class SimConfig:
    sat_headway: float = 1.9
    startup_lost: float = 2.0
    d_max: float = 300.0
    step: float = 0.5

    def __post_init__(self):
        for name in ("sat_headway", "startup_lost", "d_max", "step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if abs(self.step / sc.TIME_RESOLUTION - round(self.step / sc.TIME_RESOLUTION)) > 1e-9:
            raise ValueError("step must be a multiple of the 0.5 s timer resolution")


@dataclass
class Vehicle:
    id: int
    movement: str
    entry_time: float
    free_flow_tt: float
    exit_time: float | None = None

    @property
    def delay(self) -> float | None:
        return None if self.exit_time is None else vehicle_delay(self, self.exit_time)


@dataclass(frozen=True)
class EnvObservation:
    lane_counts: np.ndarray
    green_durations: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.lane_counts.astype(float), self.green_durations])


def vehicle_delay(v: Vehicle, t: float) -> float:
    """Time lost relative to free-flow progress, as of time ``t``."""
    if v.exit_time is not None and t >= v.exit_time:
        return max(0.0, (v.exit_time - v.entry_time) - v.free_flow_tt)
    return max(0.0, (t - v.entry_time) - v.free_flow_tt)


class EmptyWindowError(ValueError):
    pass


class _Lane:
    __slots__ = ("queue", "next_free")

    def __init__(self):
        self.queue = deque()
        self.next_free = -math.inf


class IntersectionEnv:
    """One episode at a time; owns its controller state and vehicle roster."""

    def __init__(self, sim: SimConfig | None = None, geometry: LinkGeometry | None = None,
                 timings=None, horizon: float = 3600.0):
        self.sim = sim or SimConfig()
        self.geometry = geometry or LinkGeometry()
        self.timings = sc.default_timings() if timings is None else tuple(timings)
        if horizon <= 0:
            raise ValueError("horizon must be positive")
        self.horizon = float(horizon)
        self.tt_ff = self.geometry.free_flow_time
        self.state: sc.ControllerState | None = None

    # ------------------------------------------------------------------ setup
    def reset(self, scenario: OdMatrix | None, seed: int = 0,
              arrivals: ArrivalStream | None = None) -> EnvObservation:
        if arrivals is None:
            arrivals = generate_arrivals(scenario, self.horizon, seed)
        self.arrivals = arrivals
        self.scenario = scenario
        self.seed = seed
        self.state = sc.initial_state(self.timings)
        self.lanes = [_Lane() for _ in LANES]
        self._arr_times = arrivals.times.tolist()
        self._arr_moves = arrivals.movements.tolist()
        self._next_arrival = 0
        self.entry = []
        self.move = []
        self.exit = []
        self.n_entered = 0
        self.n_exited = 0
        self._prev_green = set(sc.green_movements(self.state))
        bars = [[] for _ in MOVEMENTS]
        for t, m in zip(self._arr_times, self._arr_moves):
            bars[m].append(t + self.tt_ff)
        self._bar_times = [np.asarray(b) for b in bars]
        self.lane_discharges = [[] for _ in LANES]
        return self.observe()

    @property
    def clock(self) -> float:
        return self.state.clock

    # -------------------------------------------------------------- dynamics
    def feasible_actions(self) -> tuple[int, ...]:
        return sc.feasible_actions(self.state)

    def feasible_mask(self) -> np.ndarray:
        return sc.feasible_mask(self.state)

    def step(self, action: int):
        if self.state is None:
            raise RuntimeError("reset() must be called before step()")
        if action not in sc.feasible_actions(self.state):
            raise sc.ContractViolation(f"action {action} is infeasible at t={self.clock}")
        self.state = sc.apply_action(self.state, action)
        dt = sc.controller_timestep(self.state)
        dt = min(dt, max(self.horizon - self.clock, 0.0))
        self.run_for(dt)
        terminal = self.clock >= self.horizon - 1e-9
        return self.observe(), self.reward(), terminal, dt

    def run_for(self, dt: float) -> None:
        """Advance traffic and signals by ``dt`` (no decision in between)."""
        h = self.sim.step
        n = int(round(dt / h))
        if abs(n * h - dt) > 1e-9:
            raise ValueError(f"dt={dt} is not a multiple of the sim step {h}")
        for _ in range(n):
            self._substep(h)

    def _substep(self, h: float) -> None:
        t0 = self.state.clock
        t1 = t0 + h
        # arrivals
        times, moves = self._arr_times, self._arr_moves
        i = self._next_arrival
        while i < len(times) and times[i] < t1:
            self._insert(times[i], moves[i])
            i += 1
        self._next_arrival = i
        # discharge under green
        green = set(sc.green_movements(self.state))
        hw = self.sim.sat_headway
        for mv in green:
            onset = mv not in self._prev_green
            for li in MOVEMENT_LANES[mv]:
                lane = self.lanes[li]
                q = lane.queue
                if onset and q and self.entry[q[0]] + self.tt_ff <= t0:
                    lane.next_free = max(lane.next_free, t0 + self.sim.startup_lost)
                while q:
                    vid = q[0]
                    cand = max(self.entry[vid] + self.tt_ff, lane.next_free, t0)
                    if cand >= t1:
                        break
                    q.popleft()
                    self.exit[vid] = cand
                    self.n_exited += 1
                    lane.next_free = cand + hw
                    self.lane_discharges[li].append(cand)
        self._prev_green = green
        self.state, _ = sc.advance(self.state, h)

    def _insert(self, t: float, m: int) -> None:
        mv = MOVEMENTS[m]
        lanes = MOVEMENT_LANES[mv]
        if len(lanes) == 1:
            li = lanes[0]
        else:
            li = min(lanes, key=lambda k: (len(self.lanes[k].queue), k))
        vid = len(self.entry)
        self.entry.append(t)
        self.move.append(m)
        self.exit.append(None)
        self.lanes[li].queue.append(vid)
        self.n_entered += 1

    # ----------------------------------------------------------- measurement
    @property
    def n_present(self) -> int:
        return sum(len(l.queue) for l in self.lanes)

    def lane_counts(self) -> np.ndarray:
        return np.array([len(l.queue) for l in self.lanes], dtype=np.int64)

    def observe(self) -> EnvObservation:
        return EnvObservation(self.lane_counts(), sc.signal_state_vector(self.state))

    def total_delay(self, t: float | None = None) -> float:
        """Sum of current delays over vehicles still on the approaches."""
        t = self.clock if t is None else t
        cutoff = t - self.tt_ff
        total = 0.0
        for lane in self.lanes:
            for vid in lane.queue:
                e = self.entry[vid]
                if e >= cutoff:
                    break
                total += cutoff - e
        return total

    def reward(self, t: float | None = None) -> float:
        return -self.total_delay(t) / self.sim.d_max

    def present_vehicles(self) -> list[Vehicle]:
        return [self.vehicle(v) for lane in self.lanes for v in lane.queue]

    def vehicle(self, vid: int) -> Vehicle:
        return Vehicle(vid, MOVEMENTS[self.move[vid]], self.entry[vid], self.tt_ff, self.exit[vid])

    def vehicles(self) -> list[Vehicle]:
        return [self.vehicle(i) for i in range(len(self.entry))]

    def detector_state(self) -> dict:
        """Stop-bar detection per movement: (vehicles waiting at the bar, last actuation time)."""
        t = self.clock
        out = {}
        for k, mv in enumerate(MOVEMENTS):
            waiting = 0
            for li in MOVEMENT_LANES[mv]:
                for vid in self.lanes[li].queue:
                    if self.entry[vid] + self.tt_ff > t:
                        break
                    waiting += 1
            bars = self._bar_times[k]
            j = int(np.searchsorted(bars, t, side="right"))
            last = float(bars[j - 1]) if j > 0 else -math.inf
            out[mv] = (waiting, last)
        return out

    def movement_statistics(self, start: float, end: float) -> dict:
        """Mean total delay of vehicles that exited inside [start, end], by movement."""
        if not end > start:
            raise EmptyWindowError(f"empty measurement window [{start}, {end}]")
        sums = {m: 0.0 for m in MOVEMENTS}
        counts = {m: 0 for m in MOVEMENTS}
        for e, m, x in zip(self.entry, self.move, self.exit):
            if x is None or x < start or x > end:
                continue
            mv = MOVEMENTS[m]
            sums[mv] += max(0.0, x - e - self.tt_ff)
            counts[mv] += 1
        stats = {mv: {"mean": sums[mv] / counts[mv] if counts[mv] else math.nan,
                      "n": counts[mv], "sum": sums[mv]} for mv in MOVEMENTS}
        stats["_in_network"] = self.n_present
        return stats

    def write_event_log(self, path) -> None:
        with open(path, "w") as fh:
            for i, (e, m, x) in enumerate(zip(self.entry, self.move, self.exit)):
                d = None if x is None else max(0.0, x - e - self.tt_ff)
                fh.write(json.dumps({"id": i, "movement": MOVEMENTS[m], "entry": e,
                                     "exit": x, "delay": d}) + "\n")
