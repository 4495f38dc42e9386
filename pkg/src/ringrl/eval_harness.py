"""Replicated evaluation runs, per-movement delay reports and learning curves.

Controllers are named by short spec strings so that replications can be
farmed out to worker processes:

    actuated            default actuated parameters
    actuated:FILE.json  actuated parameters from a tuner output
    fixed               fixed-time plan derived from the scenario's volumes
    fixed:FILE.json     explicit fixed-time plan
    random[:SEED]       uniform choice over feasible actions
    policy:FILE.rlck    greedy trained policy (a bare *.rlck path also works)
    sample:FILE.rlck    stochastic trained policy, seeded per replication
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .controllers import (
    ActuatedController, ActuatedParams, ConfigurationError, FixedPlan, FixedTimeController,
    RandomFeasibleController, fixed_plan_from_volumes, run_controller,
)
from .od_demand import MOVEMENTS, OdMatrix, dissimilarity, od_to_movements
from .rl_core import N_ACTIONS, STATE_DIM, ActorCritic, CheckpointError, load_checkpoint
from .traffic_sim import IntersectionEnv

log = logging.getLogger(__name__)

ALL = "ALL"
REPORT_FIELDS = ["movement", "mean_delay_s", "std_s", "n", "pct_change_vs_baseline"]


@dataclass
class EvalConfig:
    replications: int = 10
    duration: float = 7200.0
    warmup: float = 900.0
    seeds: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not 0 <= self.warmup < self.duration:
            raise ValueError("warmup must lie in [0, duration)")
        self.seeds = [int(s) for s in self.seeds]
        if self.seeds and len(self.seeds) != self.replications:
            raise ValueError(f"{len(self.seeds)} seeds given for {self.replications} replications")

    def replication_seeds(self) -> list[int]:
        return self.seeds or list(range(self.replications))


class PolicyController:
    """Drives the environment from a trained actor."""

    def __init__(self, agent: ActorCritic, greedy: bool = True, seed: int = 0):
        self.agent = agent
        self.greedy = greedy
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reset(self, env) -> None:
        self.rng = np.random.default_rng(self.seed)

    def decide(self, env) -> int:
        a, _ = self.agent.act(env.observe().vector(), env.feasible_mask(), self.rng, self.greedy)
        return a


def load_policy(path) -> ActorCritic:
    """Load a checkpoint and check it fits this environment's state and action sizes."""
    agent = load_checkpoint(path)
    if agent.actor.sizes[0] != STATE_DIM or agent.actor.sizes[-1] != N_ACTIONS \
            or agent.critic.sizes[0] != STATE_DIM or agent.critic.sizes[-1] != 1:
        raise CheckpointError(f"{path}: network sizes {agent.actor.sizes}/{agent.critic.sizes} "
                              f"do not fit a {STATE_DIM}-dim state and {N_ACTIONS} actions")
    return agent


def check_spec(spec: str) -> None:
    """Fail early on a spec that cannot be built (missing file, bad checkpoint...)."""
    kind, arg = _split(spec)
    if kind in ("policy", "sample"):
        load_policy(arg)
    elif kind == "actuated" and arg:
        ActuatedParams.from_json(json.loads(Path(arg).read_text()))
    elif kind == "fixed" and arg:
        FixedPlan.from_json(json.loads(Path(arg).read_text()))
    elif kind == "random" and arg:
        int(arg)


def _split(spec: str) -> tuple[str, str]:
    if spec.endswith(".rlck") and ":" not in spec.split("/")[0]:
        return "policy", spec
    kind, _, arg = spec.partition(":")
    if kind not in ("actuated", "fixed", "random", "policy", "sample"):
        raise ConfigurationError(f"unknown controller spec {spec!r}")
    if kind in ("policy", "sample") and not arg:
        raise ConfigurationError(f"{kind} controller needs a checkpoint path")
    return kind, arg


def build_controller(spec: str, scenario: OdMatrix, seed: int = 0, timings=None):
    kind, arg = _split(spec)
    if kind == "actuated":
        params = ActuatedParams.from_json(json.loads(Path(arg).read_text())) if arg else ActuatedParams()
        return ActuatedController(params)
    if kind == "fixed":
        if arg:
            plan = FixedPlan.from_json(json.loads(Path(arg).read_text()))
        else:
            plan = fixed_plan_from_volumes(od_to_movements(scenario), timings)
        return FixedTimeController(plan)
    if kind == "random":
        return RandomFeasibleController(int(arg) if arg else seed)
    return PolicyController(load_policy(arg), greedy=(kind == "policy"), seed=seed)


@dataclass
class ReplicationResult:
    seed: int
    stats: dict            # movement -> {"mean", "n", "sum"}
    intersection: float    # vehicle-weighted mean delay
    in_network: int        # vehicles still present at the end


def run_replication(spec: str, scenario: OdMatrix, seed: int, cfg: EvalConfig,
                    env_kwargs: dict | None = None, event_log=None) -> ReplicationResult:
    kw = dict(env_kwargs or {})
    kw["horizon"] = cfg.duration
    env = IntersectionEnv(**kw)
    run_controller(env, build_controller(spec, scenario, seed, env.timings), scenario, seed)
    st = env.movement_statistics(cfg.warmup, cfg.duration)
    if event_log is not None:
        env.write_event_log(event_log)
    n = sum(st[m]["n"] for m in MOVEMENTS)
    total = sum(st[m]["sum"] for m in MOVEMENTS)
    return ReplicationResult(seed, {m: st[m] for m in MOVEMENTS}, total / n if n else math.nan,
                             env.n_present)


def _replication_job(args):
    return run_replication(*args)


@dataclass
class MovementRow:
    movement: str
    mean_delay_s: float
    std_s: float
    n: int
    pct_change_vs_baseline: float | None = None


@dataclass
class MovementDelayReport:
    controller: str
    scenario: str
    rows: list[MovementRow]
    replications: list[ReplicationResult]

    def row(self, movement: str) -> MovementRow:
        for r in self.rows:
            if r.movement == movement:
                return r
        raise KeyError(movement)

    @property
    def mean_delay(self) -> float:
        return self.row(ALL).mean_delay_s

    @property
    def mean_in_network(self) -> float:
        return float(np.mean([r.in_network for r in self.replications]))

    def to_json(self) -> dict:
        return {"controller": self.controller, "scenario": self.scenario,
                "rows": [vars(r) for r in self.rows],
                "replications": [{"seed": r.seed, "intersection_delay_s": r.intersection,
                                  "in_network": r.in_network} for r in self.replications]}


def percent_change(baseline: float, candidate: float) -> float:
    """Positive when the candidate has the lower delay."""
    if baseline == 0:
        return math.nan
    return 100.0 * (baseline - candidate) / baseline


def aggregate(reps: Sequence[ReplicationResult], controller: str = "", scenario: str = "") -> MovementDelayReport:
    """Mean of replication means and their between-replication standard deviation."""
    rows = []
    for mv in (*MOVEMENTS, ALL):
        if mv == ALL:
            means = [r.intersection for r in reps]
            n = sum(r.stats[m]["n"] for r in reps for m in MOVEMENTS)
        else:
            means = [r.stats[mv]["mean"] for r in reps]
            n = sum(r.stats[mv]["n"] for r in reps)
        means = np.array([x for x in means if not math.isnan(x)])
        if not len(means):
            continue
        std = float(means.std(ddof=1)) if len(means) > 1 else 0.0
        rows.append(MovementRow(mv, float(means.mean()), std, int(n)))
    return MovementDelayReport(controller, scenario, rows, list(reps))


def compare(candidate: MovementDelayReport, baseline: MovementDelayReport) -> MovementDelayReport:
    """Fill the candidate's percent-change column against ``baseline``."""
    base = {r.movement: r.mean_delay_s for r in baseline.rows}
    for r in candidate.rows:
        r.pct_change_vs_baseline = percent_change(base[r.movement], r.mean_delay_s) \
            if r.movement in base else None
    return candidate


def run_replications(spec: str, scenario: OdMatrix, cfg: EvalConfig | None = None,
                     env_kwargs: dict | None = None, workers: int = 1,
                     baseline: MovementDelayReport | None = None) -> MovementDelayReport:
    cfg = cfg or EvalConfig()
    check_spec(spec)
    jobs = [(spec, scenario, s, cfg, env_kwargs) for s in cfg.replication_seeds()]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            reps = list(pool.map(_replication_job, jobs))   # map keeps seed order
    else:
        reps = [_replication_job(j) for j in jobs]
    report = aggregate(reps, spec, scenario.label)
    return compare(report, baseline) if baseline is not None else report


@dataclass
class SweepEntry:
    scenario: OdMatrix
    candidate: MovementDelayReport
    baseline: MovementDelayReport
    dissimilarity: dict[str, float]


def robustness_sweep(candidate: str, scenarios: Sequence[OdMatrix], baseline: str,
                     cfg: EvalConfig | None = None, training: Sequence[OdMatrix] = (),
                     env_kwargs: dict | None = None, workers: int = 1,
                     csv_path=None) -> list[SweepEntry]:
    if not scenarios:
        raise ValueError("robustness sweep needs at least one scenario")
    check_spec(candidate)
    check_spec(baseline)
    out = []
    for sc_ in scenarios:
        base = run_replications(baseline, sc_, cfg, env_kwargs, workers)
        cand = run_replications(candidate, sc_, cfg, env_kwargs, workers, baseline=base)
        dis = {t.label: dissimilarity(sc_, t) for t in training}
        out.append(SweepEntry(sc_, cand, base, dis))
    if csv_path is not None:
        write_sweep_csv(out, csv_path, [t.label for t in training])
    return out


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.6g}" if isinstance(x, float) else str(x)


def write_report_csv(report: MovementDelayReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for r in report.rows:
            w.writerow([r.movement, _fmt(r.mean_delay_s), _fmt(r.std_s), r.n,
                        _fmt(r.pct_change_vs_baseline)])


def write_report_json(reports: Sequence[MovementDelayReport], path) -> None:
    Path(path).write_text(json.dumps([r.to_json() for r in reports], indent=2))


def write_sweep_csv(entries: Sequence[SweepEntry], path, training_labels: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", *REPORT_FIELDS, "baseline_mean_delay_s",
                    *[f"dissimilarity_{t}" for t in training_labels]])
        for e in entries:
            dis = [f"{e.dissimilarity[t]:.3f}" for t in training_labels]
            for r in e.candidate.rows:
                try:
                    b = e.baseline.row(r.movement).mean_delay_s
                except KeyError:
                    b = None
                w.writerow([e.scenario.label, r.movement, _fmt(r.mean_delay_s), _fmt(r.std_s), r.n,
                            _fmt(r.pct_change_vs_baseline), _fmt(b), *dis])


@dataclass
class LearningCurve:
    episodes: np.ndarray
    rewards: np.ndarray
    ma100: np.ndarray
    skipped: int = 0


def moving_average(x: np.ndarray, window: int = 100) -> np.ndarray:
    """Trailing mean over the last ``window`` points (fewer at the start)."""
    x = np.asarray(x, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(1, len(x) + 1)
    lo = np.maximum(0, i - window)
    return (c[i] - c[lo]) / (i - lo)


def learning_curve(path, window: int = 100) -> LearningCurve:
    """Read a metrics log (one JSON object per line) into a reward series."""
    eps, rew, skipped = [], [], 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                e, r = int(rec["episode"]), float(rec["mean_reward"])
                if not math.isfinite(r):
                    raise ValueError("non-finite reward")
            except (ValueError, KeyError, TypeError) as exc:
                log.warning("%s:%d: skipping malformed record (%s)", path, lineno, exc)
                skipped += 1
                continue
            eps.append(e)
            rew.append(r)
    if not eps:
        raise ValueError(f"{path}: no usable records")
    rewards = np.array(rew)
    return LearningCurve(np.array(eps), rewards, moving_average(rewards, window), skipped)


def write_learning_curve_csv(curve: LearningCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "mean_reward", "ma100"])
        for e, r, m in zip(curve.episodes, curve.rewards, curve.ma100):
            w.writerow([int(e), repr(float(r)), repr(float(m))])
