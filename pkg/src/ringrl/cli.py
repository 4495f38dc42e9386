"""Command-line entry point: ``ringrl <command> [options]``.

Exit codes: 0 success, 2 configuration or usage error, 3 network failure,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import eval_harness as ev
from .config import ConfigError, RunConfig, load_config
from .controllers import ConfigurationError, tune_actuated
from .dist.learner import Learner, parse_address, staleness_bound
from .dist.worker import NetworkError, Worker
from .od_demand import (
    dissimilarity_matrix, od_to_movements, resolve_scenario, sample_matrix, save_matrix,
    volume_capacity_ratio,
)
from .rl_core import ActorCritic, CheckpointError, save_checkpoint
from .training import train

EXIT_OK, EXIT_CONFIG, EXIT_NETWORK, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("ringrl")


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    if getattr(args, "scenario", None):
        cfg.scenarios = [x for s in args.scenario for x in s.split(",") if x]
    if getattr(args, "episodes", None) is not None:
        if args.episodes < 0:
            raise ConfigError("--episodes must be >= 0")
        cfg.episodes = args.episodes
    if getattr(args, "envs", None) is not None:
        if args.envs < 1:
            raise ConfigError("--envs must be >= 1")
        cfg.dist.envs = args.envs
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    scenarios = cfg.load_scenarios()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2))

    def progress(ep, rec):
        if (ep + 1) % 10 == 0:
            log.info("episode %d  mean reward %.4f  decisions %d", ep + 1, rec["mean_reward"], rec["length"])

    if cfg.episodes == 0:
        save_checkpoint(ActorCritic(cfg.ppo, cfg.seed), out / "checkpoint.rlck")
        (out / "metrics.jsonl").write_text("")
    else:
        train(scenarios, cfg.episodes, cfg.seed, cfg.ppo, cfg.env_kwargs(), n_envs=cfg.dist.envs,
              out_dir=out, checkpoint_every=cfg.checkpoint_every, callback=progress)
    print(out / "checkpoint.rlck")
    return EXIT_OK


def cmd_learner(args) -> int:
    cfg = _config(args)
    host, port = parse_address(args.listen or cfg.dist.listen)
    learner = Learner(cfg.ppo, cfg.seed,
                      threshold=args.threshold or cfg.dist.threshold,
                      staleness=staleness_bound(args.staleness) if args.staleness is not None
                      else cfg.dist.staleness,
                      out_dir=cfg.out_dir, checkpoint_every=cfg.checkpoint_every,
                      max_updates=args.updates if args.updates is not None else cfg.dist.updates)
    try:
        learner.bind(host, port)
    except OSError as exc:
        raise NetworkError(f"cannot listen on {host}:{port}: {exc.strerror or exc}") from None
    log.info("learner listening on %s:%d", *learner.address)
    stats = learner.serve(idle_timeout=cfg.dist.idle_timeout)
    print(json.dumps({"updates": stats.updates, "accepted_batches": stats.accepted_batches,
                      "stale_batches": stats.stale_batches,
                      "dropped_connections": stats.dropped_connections}))
    return EXIT_OK


def cmd_worker(args) -> int:
    cfg = _config(args)
    address = parse_address(args.connect or cfg.dist.connect)
    worker = Worker(address, cfg.load_scenarios(), cfg.seed,
                    worker_id=args.worker_id if args.worker_id is not None else cfg.dist.worker_id,
                    n_envs=cfg.dist.envs, config=cfg.ppo, env_kwargs=cfg.env_kwargs(),
                    sync=args.sync, max_episodes=args.max_episodes,
                    attempts=cfg.dist.connect_attempts)
    n = worker.run()
    print(json.dumps({"episodes": n, "versions_seen": len(worker.versions_seen)}))
    return EXIT_OK


def _eval_config(cfg: RunConfig, args) -> ev.EvalConfig:
    e = cfg.eval
    reps = args.replications or e.replications
    seeds = e.seeds if len(e.seeds) == reps else []
    return ev.EvalConfig(reps, args.duration or e.duration, e.warmup if args.warmup is None else args.warmup,
                         seeds)


def cmd_eval(args) -> int:
    cfg = _config(args)
    try:
        ecfg = _eval_config(cfg, args)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.metrics:
        curve = ev.learning_curve(args.metrics)
        ev.write_learning_curve_csv(curve, out / "learning_curve.csv")
        if curve.skipped:
            log.warning("skipped %d malformed metrics lines", curve.skipped)
        if not args.candidate:
            return EXIT_OK
    if not args.candidate:
        raise UsageError("eval needs --candidate (or --metrics for a learning curve)")
    for spec in (args.candidate, args.baseline):
        ev.check_spec(spec)
    scenarios = cfg.load_scenarios()
    env_kw = cfg.eval_env_kwargs()
    if len(scenarios) == 1 and not args.train_scenario:
        base = ev.run_replications(args.baseline, scenarios[0], ecfg, env_kw, args.workers)
        cand = ev.run_replications(args.candidate, scenarios[0], ecfg, env_kw, args.workers, baseline=base)
        ev.write_report_csv(cand, out / "report.csv")
        ev.write_report_json([cand, base], out / "report.json")
        for r in cand.rows:
            pct = "" if r.pct_change_vs_baseline is None else f"{r.pct_change_vs_baseline:+.1f}%"
            print(f"{r.movement:4s} {r.mean_delay_s:9.2f} s  sd {r.std_s:7.2f}  n {r.n:7d}  {pct}")
        return EXIT_OK
    try:
        training = [resolve_scenario(s) for a in args.train_scenario or [] for s in a.split(",") if s]
    except FileNotFoundError as exc:
        raise ConfigError(f"no such training pattern: {exc}") from None
    entries = ev.robustness_sweep(args.candidate, scenarios, args.baseline, ecfg, training, env_kw,
                                  args.workers, csv_path=out / "sweep.csv")
    ev.write_report_json([r for e in entries for r in (e.candidate, e.baseline)], out / "sweep.json")
    for e in entries:
        print(f"{e.scenario.label}: {e.candidate.mean_delay:.2f} s vs {e.baseline.mean_delay:.2f} s "
              f"({e.candidate.row(ev.ALL).pct_change_vs_baseline:+.1f}%)")
    return EXIT_OK


def cmd_tune_asc(args) -> int:
    cfg = _config(args)
    scenario = cfg.load_scenarios()[0]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env_kw = cfg.eval_env_kwargs()
    env_kw["horizon"] = cfg.eval.duration
    grid = {}
    if args.through:
        grid["through_grid"] = _floats(args.through)
    if args.left:
        grid["left_grid"] = _floats(args.left)
    params, rows = tune_actuated(scenario, seeds=range(cfg.seed, cfg.seed + args.seeds), **grid,
                                 env_kwargs=env_kw, warmup=cfg.eval.warmup, workers=args.workers,
                                 csv_path=out / "asc_grid.csv")
    (out / "asc_params.json").write_text(json.dumps(params.to_json(), indent=2) + "\n")
    print(json.dumps(params.to_json()))
    return EXIT_OK


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_ssim(args) -> int:
    if not args.patterns:
        raise UsageError("ssim needs at least one pattern file or label")
    try:
        pats = [resolve_scenario(p) for p in args.patterns]
    except FileNotFoundError as exc:
        raise ConfigError(f"no such pattern: {exc}") from None
    mat = dissimilarity_matrix(pats)
    labels = [p.label or Path(a).stem for p, a in zip(pats, args.patterns)]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["", *labels])
        for lab, row in zip(labels, mat):
            w.writerow([lab, *[f"{x:.3f}" for x in row]])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def cmd_gen_demand(args) -> int:
    lo, hi = args.vc_min, args.vc_max
    if not 0 < lo <= hi:
        raise ConfigError("v/c band must satisfy 0 < min <= max")
    out = Path(args.out or "demand")
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    for k in range(args.count):
        m = sample_matrix(rng, (lo, hi), label=f"G{k:03d}")
        save_matrix(m, out / f"{m.label}.json")
        print(f"{m.label} v/c={volume_capacity_ratio(od_to_movements(m)):.3f} total={m.total():.0f} veh/h")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ringrl", description="Dual-ring signal control with PPO")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, episodes=False, envs=False):
        sp.add_argument("--config", help="JSON run configuration (default: $RINGRL_CONFIG)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--scenario", action="append",
                        help="pattern label or O-D JSON file; repeat or comma-separate for several")
        if episodes:
            sp.add_argument("--episodes", type=int)
        if envs:
            sp.add_argument("--envs", type=int, help="environment instances in this process")

    sp = sub.add_parser("train", help="single-process training")
    common(sp, episodes=True, envs=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("learner", help="run the distributed learner")
    common(sp)
    sp.add_argument("--listen", help="host:port to bind")
    sp.add_argument("--threshold", type=int, help="transitions per update")
    sp.add_argument("--staleness", help="max version lag, or 'inf'")
    sp.add_argument("--updates", type=int, help="stop after this many updates")
    sp.set_defaults(func=cmd_learner)

    sp = sub.add_parser("worker", help="run a rollout worker")
    common(sp, envs=True)
    sp.add_argument("--connect", help="learner host:port")
    sp.add_argument("--worker-id", type=int)
    sp.add_argument("--max-episodes", type=int)
    sp.add_argument("--sync", action="store_true", help="wait for a fresh policy after each episode")
    sp.set_defaults(func=cmd_worker)

    sp = sub.add_parser("eval", help="replicated evaluation against a baseline")
    common(sp)
    sp.add_argument("--candidate", help="controller spec, e.g. policy:run/checkpoint.rlck")
    sp.add_argument("--baseline", default="actuated", help="controller spec (default: actuated)")
    sp.add_argument("--train-scenario", action="append",
                    help="training pattern for dissimilarity annotations (turns on the sweep)")
    sp.add_argument("--replications", type=int)
    sp.add_argument("--duration", type=float)
    sp.add_argument("--warmup", type=float)
    sp.add_argument("--workers", type=int, default=1, help="replication processes")
    sp.add_argument("--metrics", help="metrics.jsonl to turn into learning_curve.csv")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("tune-asc", help="grid-search actuated max greens")
    common(sp)
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--through", help="through max-green grid, e.g. 20,30,40")
    sp.add_argument("--left", help="left max-green grid, e.g. 15,20,25")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_tune_asc)

    sp = sub.add_parser("ssim", help="pairwise O-D dissimilarity matrix as CSV")
    sp.add_argument("patterns", nargs="*")
    sp.add_argument("--out", help="CSV path (default: stdout)")
    sp.set_defaults(func=cmd_ssim)

    sp = sub.add_parser("gen-demand", help="sample O-D matrices inside a v/c band")
    sp.add_argument("--count", type=int, default=10)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="output directory (default: demand)")
    sp.add_argument("--vc-min", type=float, default=0.5)
    sp.add_argument("--vc-max", type=float, default=1.05)
    sp.set_defaults(func=cmd_gen_demand)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError, UsageError) as exc:
        print(f"ringrl {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NetworkError as exc:
        print(f"ringrl {args.command}: network failure: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except KeyboardInterrupt:
        print(f"ringrl {args.command}: interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except (CheckpointError, OSError, RuntimeError, ValueError) as exc:
        print(f"ringrl {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
