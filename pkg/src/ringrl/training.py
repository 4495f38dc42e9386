"""Episode rollouts and the single-process training loop.

Seeds are derived the same way here and in the distributed worker, so one
worker driven in lockstep reproduces the in-process run exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .od_demand import OdMatrix
from .rl_core import ActorCritic, PpoConfig, Transition, append_metrics, save_checkpoint
from .traffic_sim import IntersectionEnv

log = logging.getLogger(__name__)


def episode_seed(base: int, worker: int, env_index: int, episode: int) -> int:
    ss = np.random.SeedSequence([base, worker, env_index, episode])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def update_rng(base: int) -> np.random.Generator:
    return np.random.default_rng([base, 0xC0FFEE])


@dataclass
class EpisodeSummary:
    mean_reward: float
    length: int
    sim_time: float
    scenario: str


class EpisodeRunner:
    """One environment instance with its scenario assignment and private RNG."""

    def __init__(self, scenarios: Sequence[OdMatrix], seed: int, worker: int = 0,
                 env_index: int = 0, env_kwargs: dict | None = None):
        if not scenarios:
            raise ValueError("at least one scenario is required")
        self.scenarios = list(scenarios)
        self.seed = seed
        self.worker = worker
        self.env_index = env_index
        self.env = IntersectionEnv(**(env_kwargs or {}))
        self.rng = np.random.default_rng([seed, worker, env_index, 7])
        self.episodes = 0

    def next_scenario(self) -> OdMatrix:
        return self.scenarios[self.episodes % len(self.scenarios)]

    def run(self, agent: ActorCritic, greedy: bool = False) -> tuple[list[Transition], EpisodeSummary]:
        scenario = self.next_scenario()
        seed = episode_seed(self.seed, self.worker, self.env_index, self.episodes)
        self.episodes += 1
        return rollout(self.env, agent, scenario, seed, self.rng, greedy)


def rollout(env: IntersectionEnv, agent: ActorCritic, scenario: OdMatrix, seed: int,
            rng: np.random.Generator | None, greedy: bool = False):
    obs = env.reset(scenario, seed)
    state = obs.vector()
    out = []
    terminal = False
    while not terminal:
        mask = env.feasible_mask()
        a, logp = agent.act(state, mask, rng, greedy)
        obs, r, terminal, dt = env.step(a)
        nxt = obs.vector()
        out.append(Transition(state, a, logp, r, nxt, terminal, mask, dt))
        state = nxt
    rewards = [t.reward for t in out]
    summary = EpisodeSummary(float(np.mean(rewards)), len(out), env.clock, scenario.label)
    return out, summary


@dataclass
class TrainResult:
    agent: ActorCritic
    metrics: list = field(default_factory=list)


def train(scenarios: Sequence[OdMatrix], episodes: int, seed: int = 0,
          config: PpoConfig | None = None, env_kwargs: dict | None = None,
          n_envs: int = 1, out_dir=None, checkpoint_every: int = 100,
          callback: Callable[[int, dict], None] | None = None) -> TrainResult:
    """In-process loop: roll out one episode, update, repeat.

    With ``n_envs`` > 1 the environments take turns and each one is assigned
    scenarios round-robin by its index, mirroring a multi-environment worker.
    """
    agent = ActorCritic(config or PpoConfig(), seed)
    urng = update_rng(seed)
    runners = [EpisodeRunner(_assign(scenarios, k, n_envs), seed, 0, k, env_kwargs)
               for k in range(n_envs)]
    out = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        metrics_path.write_text("")
        save_checkpoint(agent, out / "checkpoint.rlck")
    result = TrainResult(agent)
    for ep in range(episodes):
        runner = runners[ep % n_envs]
        trs, summary = runner.run(agent)
        stats = agent.update(trs, urng)
        rec = {"episode": ep, "mean_reward": summary.mean_reward,
               "actor_loss": stats["actor_loss"], "critic_loss": stats["critic_loss"],
               "entropy": stats["entropy"], "clip_fraction": stats["clip_fraction"],
               "length": summary.length, "sim_time": summary.sim_time, "scenario": summary.scenario}
        result.metrics.append(rec)
        if metrics_path is not None:
            append_metrics(metrics_path, rec)
            if (ep + 1) % checkpoint_every == 0:
                save_checkpoint(agent, out / "checkpoint.rlck")
        if callback is not None:
            callback(ep, rec)
    if out is not None:
        save_checkpoint(agent, out / "checkpoint.rlck")
    return result


def _assign(scenarios: Sequence[OdMatrix], env_index: int, n_envs: int) -> list[OdMatrix]:
    """Partition scenarios across environments; with fewer envs than scenarios each env cycles."""
    if n_envs >= len(scenarios):
        return [scenarios[env_index % len(scenarios)]]
    return [s for k, s in enumerate(scenarios) if k % n_envs == env_index]
