"""``gateracer`` command line: train, eval, rollout, gen-tracks, norm-stats, bench."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from gateracer.config import (
    ConfigError, DisplacementSpec, RunConfig, apply_overrides, dump_config, from_dict, load_config, to_dict,
)
from gateracer.dynamics import QuadParams
from gateracer.env import (
    EnvConfig, RacingEnv, actions_to_forces, compute_norm_stats, forces_to_actions,
)
from gateracer.ppo import (
    CheckpointError, DeterministicPolicy, DivergenceError, evaluate, load_policy, train, Trainer,
)
from gateracer.track import (
    BUNDLED_TRACKS, Track, TrackError, TrackGenConfig, bundled_track, displace_track,
    generate_random_track, load_track, save_track,
)
from gateracer.vecenv import VecEnv

log = logging.getLogger("gateracer")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_INTERRUPTED = 0, 2, 3, 4, 130
REPORT_VERSION = 1
TRAJECTORY_HEADER = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz",
                     "f1", "f2", "f3", "f4", "r_p", "r_s", "r_total", "gate_idx"]


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def resolve_track(spec: str) -> Track:
    if spec in BUNDLED_TRACKS:
        return bundled_track(spec)
    path = Path(spec)
    if not path.exists():
        raise FileNotFoundError(f"track {spec!r} is neither a bundled track ({', '.join(BUNDLED_TRACKS)}) nor a file")
    return load_track(path)


def load_gen_config(path) -> TrackGenConfig:
    if path is None:
        return TrackGenConfig()
    raw = yaml.safe_load(Path(path).read_text()) or {}
    return from_dict(TrackGenConfig, raw, "gen")


def _checkpoint_setup(path):
    model, norm, payload = load_policy(path)
    cfg = from_dict(EnvConfig, payload["env"], "env")
    params = from_dict(QuadParams, payload["quad"], "quad")
    return model, norm, cfg, params


# ---------------------------------------------------------------------------
# commands


RESUMABLE = {"ppo.iterations", "ppo.time_budget_s"}


def resume_config(run, overrides):
    """Stored run config with only the run-length fields overridable."""
    for item in overrides:
        key = item.split("=", 1)[0].strip()
        if key not in RESUMABLE:
            raise ConfigError(f"cannot change {key!r} when resuming; allowed: {', '.join(sorted(RESUMABLE))}")
    return from_dict(RunConfig, apply_overrides(to_dict(run), overrides))


def cmd_train(args) -> int:
    if args.resume:
        trainer = Trainer.load(args.resume)
        cfg = resume_config(trainer.run, args.set)
        trainer.run = cfg
        out = Path(args.out or Path(args.resume).parent)
        out.mkdir(parents=True, exist_ok=True)
    else:
        cfg = load_config(args.config, args.set)
        out = Path(args.out or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").unlink(missing_ok=True)
        for stale in ("best.pt", "last.pt"):
            (out / stale).unlink(missing_ok=True)
        trainer = Trainer(cfg)
    (out / "config.yaml").write_text(dump_config(cfg))
    trainer.norm.save(out / "norm_stats.json")
    try:
        train(cfg, out_dir=out, trainer=trainer)
    except KeyboardInterrupt:
        print(f"interrupted; checkpoint written to {out / 'last.pt'}", file=sys.stderr)
        return EXIT_INTERRUPTED
    if args.plots:
        from gateracer.plotting import plot_training

        records = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
        plot_training(out / "training.png", records)
    best = trainer.best
    print(f"finished {trainer.iteration} iterations, {trainer.venv.steps} steps; "
          f"best checkpoint from iteration {best['iter'] if best else trainer.iteration}; outputs in {out}")
    return EXIT_OK


def eval_tracks(args) -> list[Track]:
    rng = np.random.default_rng(args.seed)
    if args.track == "random":
        gen = load_gen_config(args.gen)
        return [generate_random_track(gen, args.complexity, rng) for _ in range(args.n)]
    base = resolve_track(args.track)
    if args.laps:
        base = dataclasses.replace(base, laps=args.laps)
    if args.level > 0:
        bounds = DisplacementSpec().bounds(args.level)
        return [displace_track(base, bounds, rng) for _ in range(args.n)]
    return [base] * args.n


def report_dict(rep, **meta) -> dict:
    def num(v):
        return None if isinstance(v, float) and not math.isfinite(v) else v

    return {
        "version": REPORT_VERSION,
        **meta,
        "n_episodes": rep.n_episodes,
        "completed": rep.completed,
        "crash_count": rep.crash_count,
        "timeouts": rep.timeouts,
        "crash_ratio": rep.crash_ratio,
        "completion_ratio": rep.completion_ratio,
        "avg_lap_time": num(rep.avg_lap_time),
        "lap_time_std": num(rep.lap_time_std),
        "margin_mean": num(rep.margin_mean),
        "margin_std": num(rep.margin_std),
        "n_margins": rep.n_margins,
        "episodes": rep.episodes,
    }


def cmd_eval(args) -> int:
    if args.n < 1:
        raise ConfigError("n must be >= 1")
    if not 0.0 <= args.level <= 1.0:
        raise ConfigError("level must lie in [0, 1]")
    model, norm, cfg, params = _checkpoint_setup(args.checkpoint)
    tracks = eval_tracks(args)
    rep = evaluate(model, tracks, cfg=cfg, params=params, norm=norm, start_jitter=args.jitter, seed=args.seed)
    report = report_dict(rep, checkpoint=str(args.checkpoint), track=args.track, level=args.level,
                         seed=args.seed, jitter=args.jitter)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1))
    with open(out.with_suffix(".csv"), "w", newline="") as f:
        w = csv.writer(f)
        cols = ["episode", "outcome", "crashed", "completed", "lap_time", "gates_passed", "steps", "mean_margin"]
        w.writerow(cols)
        for e in rep.episodes:
            w.writerow(["" if e[c] is None else e[c] for c in cols])
    if args.plot:
        from gateracer.plotting import plot_eval

        plot_eval(out.with_suffix(".png"), report)
    lap = "n/a" if report["avg_lap_time"] is None else f"{report['avg_lap_time']:.3f} s"
    print(f"episodes {rep.n_episodes}  completed {rep.completed}  crashes {rep.crash_count}  avg lap {lap}")
    return EXIT_OK


def rollout_rows(model, norm, cfg: EnvConfig, params: QuadParams, track: Track) -> list[list[str]]:
    env = RacingEnv(track, dataclasses.replace(cfg, init_strategy="start"), params, norm)
    obs = env.reset("start")
    policy = DeterministicPolicy(model)

    def row(t, x, f, r_p, r_s, r_total, k):
        return [f"{t:.6f}", *(_fmt(v) for v in x[0:13]), *(_fmt(v) for v in f),
                _fmt(r_p), _fmt(r_s), _fmt(r_total), str(k)]

    rows = [row(0.0, env.core.x[0], np.zeros(4), 0.0, 0.0, 0.0, env.next_gate)]
    done = False
    while not done:
        action = np.clip(policy(obs[None, :])[0], -1.0, 1.0)
        res = env.step(action)
        f = actions_to_forces(action.reshape(1, 4), params)[0]
        rows.append(row(env.time, env.core.x[0], f, res.reward.r_p, res.reward.r_s, res.reward.total,
                        env.next_gate))
        obs, done = res.observation, res.done
    return rows


def cmd_rollout(args) -> int:
    model, norm, cfg, params = _checkpoint_setup(args.checkpoint)
    track = resolve_track(args.track)
    if args.laps:
        track = dataclasses.replace(track, laps=args.laps)
    rows = rollout_rows(model, norm, cfg, params, track)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        w.writerows(rows)
    if args.plot:
        from gateracer.plotting import plot_trajectory

        data = np.array([[float(v) for v in r[1:11]] for r in rows])
        plot_trajectory(out.with_suffix(".png"), data[:, 0:3], np.linalg.norm(data[:, 7:10], axis=1), track,
                        title=f"{args.track}, {track.laps} lap(s)")
    print(f"wrote {len(rows) - 1} steps to {out}")
    return EXIT_OK


def cmd_gen_tracks(args) -> int:
    if args.n < 1:
        raise ConfigError("n must be >= 1")
    if not 0.0 <= args.complexity <= 1.0:
        raise ConfigError("complexity must lie in [0, 1]")
    gen = load_gen_config(args.gen)
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tracks = []
    width = max(3, len(str(args.n - 1)))
    for i in range(args.n):
        t = generate_random_track(gen, args.complexity, rng)
        save_track(t, out / f"track_{i:0{width}d}.yaml")
        tracks.append(t)
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["track", "gates", "length_m", "elevation_m"])
        for i, t in enumerate(tracks):
            w.writerow([f"track_{i:0{width}d}", len(t), f"{t.lap_length():.3f}", f"{t.elevation_change():.3f}"])
    if args.plot:
        from gateracer.plotting import plot_tracks

        plot_tracks(out / "tracks.png", tracks)
    print(f"wrote {args.n} tracks to {out}")
    return EXIT_OK


def cmd_norm_stats(args) -> int:
    run = load_config(args.config, args.set)
    policy = None
    cfg, params = run.env, run.quad
    if args.checkpoint:
        model, norm, cfg, params = _checkpoint_setup(args.checkpoint)
        inner = DeterministicPolicy(model)

        def normalized_policy(obs, core):
            return inner(norm.normalize(obs))

        policy = normalized_policy

    gen = load_gen_config(args.gen) if args.gen else run.norm_gen
    stats = compute_norm_stats(policy, gen, args.n, args.seed, cfg, params)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stats.save(out)
    print(f"wrote {stats.dim}-dim statistics from {args.n} tracks to {out}")
    return EXIT_OK


def run_bench(n_envs: int, seconds: float, workers: int = 1, track: str = "alphapilot", seed: int = 0) -> dict:
    params = QuadParams()
    cfg = EnvConfig(init_strategy="segment")
    venv = VecEnv(resolve_track(track), n_envs, cfg, params, seed=seed, n_workers=workers)
    venv.reset(seed=seed)
    rng = np.random.default_rng(seed)
    hover = forces_to_actions(np.full((n_envs, 4), params.hover_thrust), params)
    noise = rng.normal(0.0, 0.3, size=(64, n_envs, 4))
    venv.step(hover)  # compile outside the timed window
    start_steps = venv.steps
    t0 = time.perf_counter()
    i = 0
    while True:
        venv.step(np.clip(hover + noise[i % 64], -1.0, 1.0))
        i += 1
        elapsed = time.perf_counter() - t0
        if elapsed >= seconds:
            break
    venv.close()
    steps = venv.steps - start_steps
    return {"n_envs": n_envs, "workers": workers, "steps": steps, "elapsed_s": elapsed,
            "steps_per_s": steps / elapsed, "episodes": venv.episodes}


def cmd_bench(args) -> int:
    if args.n_envs < 1 or args.seconds <= 0 or args.workers < 1:
        raise ConfigError("n-envs and workers must be >= 1 and seconds > 0")
    res = run_bench(args.n_envs, args.seconds, args.workers, args.track, args.seed)
    print("n_envs,workers,steps,elapsed_s,steps_per_s")
    print(f"{res['n_envs']},{res['workers']},{res['steps']},{res['elapsed_s']:.6f},{res['steps_per_s']:.1f}")
    if args.out:
        Path(args.out).write_text(json.dumps(res, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gateracer", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log every training iteration")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a policy with PPO")
    t.add_argument("config", nargs="?", help="run config (YAML); defaults apply when omitted")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
    t.add_argument("--out", help="output directory (default: output_dir from the config)")
    t.add_argument("--resume", help="continue from a checkpoint written by a previous run")
    t.add_argument("--plots", action="store_true", help="render training curves to training.png")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="deterministic evaluation of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--track", default="alphapilot", help="bundled name, track file, or 'random'")
    e.add_argument("-n", type=int, default=1, help="number of episodes / tracks")
    e.add_argument("--level", type=float, default=0.0, help="gate displacement level in [0, 1]")
    e.add_argument("--laps", type=int, help="override the track's lap count")
    e.add_argument("--jitter", type=float, default=0.0, help="uniform start-position jitter [m]")
    e.add_argument("--complexity", type=float, default=1.0, help="complexity of random tracks")
    e.add_argument("--gen", help="track generator config (YAML) for --track random")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="eval/report.json", help="report path; per-episode CSV goes next to it")
    e.add_argument("--plot", action="store_true")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rollout", help="export one deterministic trajectory as CSV")
    r.add_argument("checkpoint")
    r.add_argument("--track", default="alphapilot")
    r.add_argument("--laps", type=int, help="number of continuous laps")
    r.add_argument("--out", default="rollout.csv")
    r.add_argument("--plot", action="store_true")
    r.set_defaults(func=cmd_rollout)

    g = sub.add_parser("gen-tracks", help="write random tracks to YAML files")
    g.add_argument("--gen", help="track generator config (YAML)")
    g.add_argument("-n", type=int, default=10)
    g.add_argument("--complexity", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="tracks")
    g.add_argument("--plot", action="store_true")
    g.set_defaults(func=cmd_gen_tracks)

    s = sub.add_parser("norm-stats", help="observation statistics from deterministic rollouts")
    s.add_argument("--config", help="run config providing env/quad settings")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--checkpoint", help="policy to fly; the scripted pilot is used when omitted")
    s.add_argument("--gen", help="track generator config (YAML)")
    s.add_argument("-n", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="norm_stats.json")
    s.set_defaults(func=cmd_norm_stats)

    b = sub.add_parser("bench", help="measure simulator throughput")
    b.add_argument("--n-envs", type=int, default=100)
    b.add_argument("--seconds", type=float, default=30.0)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--track", default="alphapilot")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="also write the result as JSON")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, TrackError, CheckpointError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except KeyboardInterrupt:
        return EXIT_INTERRUPTED


if __name__ == "__main__":
    sys.exit(main())
