"""Command-line entry point: ``mapcal {worldgen,collect,adapt,eval,noise}``.

Settings resolve as embedded defaults < INI config file (``--config``) < flags.
Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import metrics
from .mapper import LocalizerParams
from .noise import PRESETS, fit_default_locobot_like, random_stream
from .policy import forward_policy_step
from .parallel import cached_environment
from .selfsup import Trajectory, adapt, adapt_dr, adapt_gt, collect_trajectory
from .world import EnvSpec, Environment, generate_environment

log = logging.getLogger("mapcal")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
SUITES = ("standard", "severity", "pathlen", "datasize", "testtime", "fwdbwd", "explore", "ablate")


class InputError(Exception):
    pass


# --- configuration --------------------------------------------------------------------

def _coerce(raw: str, like):
    if isinstance(like, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if like is None:
        return None if raw.strip().lower() in ("", "none", "preset") else float(raw)
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return raw.strip()


def _apply(obj, values: dict, section: str):
    known = {f.name: getattr(obj, f.name) for f in fields(obj)}
    upd = {}
    for key, raw in values.items():
        if key not in known:
            raise InputError(f"unknown config key [{section}] {key}")
        upd[key] = raw if not isinstance(raw, str) else _coerce(raw, known[key])
    return replace(obj, **upd)


def resolve_config(args) -> ex.SuiteConfig:
    cfg = ex.SuiteConfig()
    layers = []
    if getattr(args, "config", None):
        cp = configparser.ConfigParser()
        if not cp.read(args.config):
            raise InputError(f"cannot read config file {args.config}")
        layers.append({s: dict(cp[s]) for s in cp.sections()})
    layers.append(_flag_layer(args))
    seed_env = os.environ.get("MAPCAL_SEED")
    if seed_env is not None:
        try:
            cfg = replace(cfg, seed=int(seed_env))
        except ValueError:
            raise InputError("MAPCAL_SEED must be an integer") from None
    for layer in layers:
        env = dict(layer.get("env", {}))
        if env:
            cfg = replace(cfg, env_spec=_apply(cfg.env_spec, env, "env"))
        ad = dict(layer.get("adapt", {}))
        if ad:
            cfg = replace(cfg, adapt=_apply(cfg.adapt, ad, "adapt"))
        top = {}
        for sec in ("noise", "protocol", "run"):
            top.update(layer.get(sec, {}))
        if "preset" in top:
            top["noise_preset"] = top.pop("preset")
        if top:
            cfg = _apply(cfg, top, "protocol")
    if cfg.noise_preset not in PRESETS:
        raise InputError(f"unknown noise preset {cfg.noise_preset!r}")
    cfg.env_spec.validate()
    return cfg


def _flag_layer(args) -> dict:
    out = {"env": {}, "noise": {}, "protocol": {}, "run": {}, "adapt": {}}
    m = {
        "seed": ("run", "seed"), "jobs": ("run", "jobs"), "noise": ("noise", "preset"), "k": ("noise", "k"),
        "n": ("protocol", "n_train"), "steps": ("protocol", "forward_steps"),
        "loss": ("adapt", "loss_kind"), "supervision": ("adapt", "supervision"),
        "augment": ("adapt", "crops_per_traj"), "lr": ("adapt", "learning_rate"), "epochs": ("adapt", "epochs"),
    }
    for name, (sec, key) in m.items():
        v = getattr(args, name, None)
        if v is not None:
            out[sec][key] = v
    spec = getattr(args, "spec", None)
    if spec:
        out["env"].update(parse_spec(spec))
    return out


def parse_spec(text: str) -> dict:
    """``W,H,ROOMS[,RES[,OBSTACLES]]`` -> EnvSpec fields."""
    parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
    if not 3 <= len(parts) <= 5:
        raise InputError("spec must be W,H,ROOMS[,RES[,OBSTACLES]]")
    keys = ["width_m", "height_m", "n_rooms", "resolution", "n_obstacles"]
    conv = [float, float, int, float, int]
    try:
        return {k: c(p) for k, c, p in zip(keys, conv, parts)}
    except ValueError:
        raise InputError(f"bad spec {text!r}") from None


def format_config(cfg: ex.SuiteConfig) -> str:
    cp = configparser.ConfigParser()
    cp["env"] = {k: str(v) for k, v in asdict(cfg.env_spec).items()}
    cp["noise"] = {"preset": cfg.noise_preset, "k": "preset" if cfg.k is None else str(cfg.k)}
    cp["protocol"] = {
        "n_train": str(cfg.n_train), "n_eval": str(cfg.n_eval), "forward_steps": str(cfg.forward_steps),
        "world_seeds": " ".join(map(str, cfg.world_seeds)), "dr_factor": str(cfg.dr_factor),
        "episodes_per_world": str(cfg.episodes_per_world), "episode_steps": str(cfg.episode_steps),
    }
    cp["adapt"] = {k: str(v) for k, v in asdict(cfg.adapt).items()}
    cp["run"] = {"seed": str(cfg.seed), "jobs": str(cfg.jobs)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue().strip()


# --- commands ---------------------------------------------------------------------------

def cmd_worldgen(args, cfg) -> int:
    env = generate_environment(cfg.seed, cfg.env_spec)
    env.save(args.out)
    print(f"free_area_m2 {env.free_area:.4f}")
    print(f"connected {env.is_connected()}")
    return EXIT_OK


def _load_env(path) -> Environment:
    try:
        return Environment.load(path)
    except (OSError, ValueError, KeyError) as e:
        raise InputError(f"cannot load environment {path}: {e}") from None


def cmd_collect(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    act, odo = cfg.noise()
    if args.env:
        env = _load_env(args.env)
        trajs = []
        for i in range(cfg.n_train):
            rng = random_stream(cfg.seed, ex.TRAIN, 0, i)
            t = collect_trajectory(env, forward_policy_step, cfg.forward_steps, act, odo, rng)
            t.noise_preset, t.rng_seed, t.traj_id = cfg.noise_preset, cfg.seed, f"train-0-{i:04d}"
            trajs.append(t)
        envs = {env.seed: env}
    else:
        trajs = ex.collect_set(cfg, ex.TRAIN, cfg.n_train)
        envs = {s: cached_environment(s, cfg.env_spec) for s in {t.env_seed for t in trajs}}
    for seed, env in envs.items():
        env.save(out / f"env_{seed}.txt")
    for t in trajs:
        t.save(out / f"{t.traj_id}.jsonl")
    gap = [float(np.hypot(*(t.odom[-1, :2] - t.gt[-1, :2]))) for t in trajs]
    print(f"wrote {len(trajs)} trajectories (T={trajs[0].T}) to {out}; median final odometry gap {metrics.lower_median(gap):.4f} m")
    return EXIT_OK


def load_trajectories(traj_dir) -> list[Trajectory]:
    files = sorted(Path(traj_dir).glob("*.jsonl"))
    if not files:
        raise InputError(f"no trajectory files in {traj_dir}")
    try:
        return [Trajectory.load(f) for f in files]
    except (OSError, ValueError, KeyError) as e:
        raise InputError(f"bad trajectory file: {e}") from None


def environments_for(trajs, dirs, cfg) -> list[Environment]:
    """Environment of every trajectory: a saved env_<seed>.txt if present, else regenerated."""
    out, cache = [], {}
    for t in trajs:
        if t.env_seed not in cache:
            env = None
            for d in dirs:
                if d and (Path(d) / f"env_{t.env_seed}.txt").exists():
                    env = _load_env(Path(d) / f"env_{t.env_seed}.txt")
                    break
            if env is None:
                spec = EnvSpec(**t.env_spec) if t.env_spec else cfg.env_spec
                env = generate_environment(t.env_seed, spec)
            cache[t.env_seed] = env
        out.append(cache[t.env_seed])
    return out


def cmd_adapt(args, cfg) -> int:
    trajs = load_trajectories(args.traj_dir)
    t0 = time.perf_counter()
    ident = LocalizerParams.identity()
    if args.arm == "ours":
        envs = environments_for(trajs, [args.traj_dir, args.env_dir], cfg)
        theta, lg = adapt(ident, trajs, envs, cfg.adapt)
    elif args.arm == "gt":
        theta, lg = adapt_gt(ident, trajs, cfg.adapt)
    else:
        seeds = sorted({t.env_seed for t in trajs})
        spec = EnvSpec(**trajs[0].env_spec) if trajs[0].env_spec else cfg.env_spec
        theta, lg = adapt_dr(
            ident, [(s, spec) for s in seeds], ex._DRSampler(cfg.noise_preset), cfg.adapt,
            n_trajectories=cfg.dr_factor * len(trajs), forward_steps=cfg.forward_steps, jobs=cfg.jobs,
        )
    secs = time.perf_counter() - t0
    Path(args.out_theta).write_text(json.dumps(theta.to_json(), indent=1))
    log_path = args.log or str(Path(args.out_theta).with_suffix(".log.csv"))
    lg.to_csv(log_path)
    print(f"adapted {args.arm} on {len(trajs)} trajectories in {secs:.1f} s -> {args.out_theta} (log {log_path})")
    return EXIT_OK


def _load_theta(path) -> LocalizerParams:
    try:
        return LocalizerParams.from_json(json.loads(Path(path).read_text()))
    except (OSError, ValueError, KeyError) as e:
        raise InputError(f"cannot load theta {path}: {e}") from None


def _thetas_for(args, cfg) -> dict:
    """NA plus the supplied parameters, or NA plus freshly adapted ones."""
    if args.theta:
        return {"NA": LocalizerParams.identity(), "Ours": _load_theta(args.theta)}
    train = ex.collect_set(cfg, ex.TRAIN, cfg.n_train)
    return {"NA": LocalizerParams.identity(), "Ours": ex.train_arm("Ours", train, cfg).theta}


def cmd_eval(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suite = args.suite
    if suite == "standard" and args.traj_dir:
        trajs = load_trajectories(args.traj_dir)
        envs = environments_for(trajs, [args.env_dir, args.traj_dir], cfg)
        thetas = {"NA": LocalizerParams.identity()}
        if args.theta:
            thetas[Path(args.theta).stem] = _load_theta(args.theta)
        reps = []
        for a, th in thetas.items():
            xy, phi = metrics.pose_errors(th, trajs)
            mse = metrics.map_error(th, trajs, envs)
            reps.append(metrics.EvalReport(a, "traj_dir", Path(args.traj_dir).name, xy, phi, mse, seed=cfg.seed))
        res = ex.SuiteResult(reps)
    elif suite == "standard":
        res = ex.standard_suite(cfg)
    elif suite == "severity":
        res = ex.severity_sweep(cfg)
    elif suite == "pathlen":
        res = ex.path_length_sweep(cfg, _thetas_for(args, cfg))
    elif suite == "datasize":
        res = ex.datasize_suite(cfg)
    elif suite == "testtime":
        res = ex.testtime_suite(cfg)
        print(f"test-time adaptation wall-clock {res.seconds['Ours']:.1f} s")
    elif suite == "fwdbwd":
        res = ex.fwdbwd_suite(cfg, _thetas_for(args, cfg))
        for a, rows in res.curves.items():
            metrics.write_curve(out / f"curve_{a}.csv", rows)
        for a, (f, b) in res.extras["slopes"].items():
            print(f"{a}: forward slope {f:.3e} m/step, backward slope {b:.3e} m/step")
    elif suite == "explore":
        res = ex.explore_suite(cfg, _thetas_for(args, cfg))
    else:
        res = ex.ablation_suite(cfg)
    metrics.write_reports(out / "metrics.csv", res.reports)
    for r in res.reports:
        print(
            f"{r.arm:>11} {r.condition_key}={r.condition_value}: xy {r.median_xy_m:.4f} m, "
            f"phi {r.median_phi_deg:.3f} deg, map {r.map_mse:.4f}, coverage {r.cov_ratio:.2f}%"
        )
    print(f"wrote {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_noise(args, cfg) -> int:
    try:
        act, odo = fit_default_locobot_like(args.preset)
    except KeyError:
        raise InputError(f"unknown preset {args.preset!r}; choose from {', '.join(PRESETS)}") from None
    print(json.dumps({"preset": args.preset, "actuation": act.to_dict(), "odometry": odo.to_dict()}, indent=2))
    return EXIT_OK


# --- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mapcal", description="Round-trip map-consistency calibration of a 2D localizer.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [env] [noise] [protocol] [adapt] [run] sections")
    common.add_argument("--seed", type=int, help="master seed (falls back to $MAPCAL_SEED, then 0)")
    common.add_argument("--jobs", type=int, help="worker processes; results do not depend on it")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    w = sub.add_parser("worldgen", parents=[common], help="generate and save an environment")
    w.add_argument("--spec", help="W,H,ROOMS[,RES[,OBSTACLES]] in meters / count")
    w.add_argument("--out", required=True)

    c = sub.add_parser("collect", parents=[common], help="record round-trip trajectories")
    c.add_argument("--env", help="environment file; default: generate world_seeds[0] from --spec")
    c.add_argument("--spec", help="W,H,ROOMS[,RES[,OBSTACLES]] when generating")
    c.add_argument("--n", type=int, help="number of trajectories (default 160)")
    c.add_argument("--steps", type=int, help="forward steps per trajectory (default 100)")
    c.add_argument("--noise", help=f"noise preset: {', '.join(PRESETS)}")
    c.add_argument("--k", type=float, help="odometry noise severity override")
    c.add_argument("--out", required=True, help="output directory")

    a = sub.add_parser("adapt", parents=[common], help="adapt the localizer")
    a.add_argument("--traj-dir", required=True)
    a.add_argument("--env-dir", help="directory with env_<seed>.txt files (default: the trajectory dir)")
    a.add_argument("--arm", choices=("ours", "gt", "dr"), default="ours")
    a.add_argument("--loss", choices=("mse", "bce"))
    a.add_argument("--supervision", choices=("stepwise", "last_step"))
    a.add_argument("--augment", type=int, help="random crops per trajectory and epoch (0 disables)")
    a.add_argument("--lr", type=float, help="learning rate")
    a.add_argument("--epochs", type=int)
    a.add_argument("--noise", help="base preset of the randomisation (dr arm)")
    a.add_argument("--steps", type=int, help="forward steps of the randomised trips (dr arm)")
    a.add_argument("--out-theta", required=True)
    a.add_argument("--log", help="training-log CSV (default: next to --out-theta)")

    e = sub.add_parser("eval", parents=[common], help="run an evaluation suite")
    e.add_argument("--suite", choices=SUITES, default="standard")
    e.add_argument("--theta", help="adapted parameters (JSON); otherwise the suite adapts its own")
    e.add_argument("--traj-dir", help="standard suite: evaluate on these trajectories")
    e.add_argument("--env-dir")
    e.add_argument("--noise", help=f"noise preset: {', '.join(PRESETS)}")
    e.add_argument("--k", type=float)
    e.add_argument("--n", type=int, help="training trajectories")
    e.add_argument("--steps", type=int, help="forward steps per trajectory")
    e.add_argument("--out", required=True, help="output directory for metrics.csv and curves")

    n = sub.add_parser("noise", help="inspect noise presets")
    nsub = n.add_subparsers(dest="noise_cmd", required=True)
    show = nsub.add_parser("show", parents=[common], help="print a preset's parameters")
    show.add_argument("preset")
    return p


COMMANDS = {"worldgen": cmd_worldgen, "collect": cmd_collect, "adapt": cmd_adapt, "eval": cmd_eval, "noise": cmd_noise}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits with 2 on bad usage, 0 on --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        print("# resolved config")
        print(format_config(cfg))
        print("# end config", flush=True)
        return COMMANDS[args.cmd](args, cfg)
    except (InputError, ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
