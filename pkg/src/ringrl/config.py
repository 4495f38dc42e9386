"""Run configuration: one JSON document, validated in full before any work starts."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from . import signal_core as sc
from .eval_harness import EvalConfig
from .od_demand import OdMatrix, resolve_scenario
from .rl_core import PpoConfig
from .traffic_sim import LinkGeometry, SimConfig

ENV_VAR = "RINGRL_CONFIG"


class ConfigError(ValueError):
    """Raised for any invalid or unreadable configuration."""


@dataclass
class DistConfig:
    listen: str = "127.0.0.1:5555"
    connect: str = "127.0.0.1:5555"
    threshold: int = 1          # transitions buffered before an update
    staleness: float = 1        # max policy-version lag accepted
    envs: int = 1
    worker_id: int = 0
    updates: int | None = None  # learner stops after this many updates
    idle_timeout: float = 300.0
    connect_attempts: int = 6

    def __post_init__(self):
        if self.threshold < 1 or self.envs < 1:
            raise ValueError("threshold and envs must be >= 1")
        if self.staleness < 0:
            raise ValueError("staleness bound must be >= 0")
        if self.connect_attempts < 1:
            raise ValueError("connect_attempts must be >= 1")


@dataclass
class RunConfig:
    geometry: LinkGeometry = field(default_factory=LinkGeometry)
    timings: tuple = field(default_factory=sc.default_timings)
    sim: SimConfig = field(default_factory=SimConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    scenarios: list[str] = field(default_factory=lambda: ["A"])
    seed: int = 0
    out_dir: str = "runs/default"
    episodes: int = 2000
    horizon: float = 3600.0
    checkpoint_every: int = 100
    eval: EvalConfig = field(default_factory=EvalConfig)
    dist: DistConfig = field(default_factory=DistConfig)

    def env_kwargs(self) -> dict:
        return {"sim": self.sim, "geometry": self.geometry, "timings": self.timings,
                "horizon": self.horizon}

    def eval_env_kwargs(self) -> dict:
        kw = self.env_kwargs()
        kw.pop("horizon")
        return kw

    def load_scenarios(self) -> list[OdMatrix]:
        out = []
        for ref in self.scenarios:
            try:
                out.append(resolve_scenario(ref))
            except FileNotFoundError:
                raise ConfigError(f"scenario {ref!r} is neither a file nor a shipped pattern label") from None
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"scenario {ref!r}: {exc}") from None
        return out

    def validate(self) -> None:
        if not self.scenarios:
            raise ConfigError("at least one scenario is required")
        self.load_scenarios()
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")
        if self.sim.step > min(t.yellow for t in self.timings):
            raise ConfigError("simulation sub-step exceeds the shortest yellow interval")

    def to_json(self) -> dict:
        return {
            "geometry": {"length": self.geometry.length, "speed": self.geometry.speed},
            "phase_timings": sc.timings_to_config(self.timings),
            "sim": {f.name: getattr(self.sim, f.name) for f in fields(SimConfig)},
            "ppo": self.ppo.to_json(),
            "scenarios": list(self.scenarios),
            "seed": self.seed, "out_dir": self.out_dir, "episodes": self.episodes,
            "horizon": self.horizon, "checkpoint_every": self.checkpoint_every,
            "eval": {f.name: getattr(self.eval, f.name) for f in fields(EvalConfig)},
            "dist": {f.name: getattr(self.dist, f.name) for f in fields(DistConfig)},
        }


_TOP = {"geometry", "phase_timings", "sim", "ppo", "scenarios", "seed", "out_dir", "episodes",
        "horizon", "checkpoint_every", "eval", "dist"}


def _section(cls, doc: Any, name: str):
    if doc is None:
        return cls()
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{name}: expected an object")
    known = {f.name for f in fields(cls)}
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"{name}: unknown keys {sorted(extra)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def config_from_dict(doc: Mapping) -> RunConfig:
    if not isinstance(doc, Mapping):
        raise ConfigError("configuration must be a JSON object")
    extra = set(doc) - _TOP
    if extra:
        raise ConfigError(f"unknown configuration keys {sorted(extra)}")
    try:
        timings = sc.timings_from_config(doc.get("phase_timings"))
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"phase_timings: {exc}") from None
    scenarios = doc.get("scenarios", ["A"])
    if isinstance(scenarios, str) or not isinstance(scenarios, list):
        raise ConfigError("scenarios: expected a list of file paths or pattern labels")
    try:
        cfg = RunConfig(
            geometry=_section(LinkGeometry, doc.get("geometry"), "geometry"),
            timings=timings,
            sim=_section(SimConfig, doc.get("sim"), "sim"),
            ppo=_section(PpoConfig, doc.get("ppo"), "ppo"),
            scenarios=[str(s) for s in scenarios],
            seed=int(doc.get("seed", 0)),
            out_dir=str(doc.get("out_dir", "runs/default")),
            episodes=int(doc.get("episodes", 2000)),
            horizon=float(doc.get("horizon", 3600.0)),
            checkpoint_every=int(doc.get("checkpoint_every", 100)),
            eval=_section(EvalConfig, doc.get("eval"), "eval"),
            dist=_section(DistConfig, doc.get("dist"), "dist"),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def load_config(path: str | os.PathLike | None = None) -> RunConfig:
    """Read ``path``, else the file named by $RINGRL_CONFIG, else defaults."""
    path = path or os.environ.get(ENV_VAR)
    if not path:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(doc)
