"""Experiment suites: data collection, arm training and evaluation tables."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import metrics
from .mapper import LocalizerParams
from .metrics import EvalReport
from .noise import fit_default_locobot_like, random_stream, sample_dr_noise
from .parallel import cached_environment, pmap
from .policy import run_episode
from .selfsup import AdaptConfig, CollectJob, Trajectory, adapt, adapt_dr, adapt_gt, collect_many
from .world import EnvSpec

log = logging.getLogger(__name__)

# random-stream keys of the data roles (trajectory i of a role draws from
# random_stream(seed, ROLE, condition, i)); the domain-randomisation role lives in selfsup
TRAIN, EVAL, EXPLORE, TESTTIME = 1, 2, 4, 5
ARMS = ("NA", "GT", "DR", "Ours")
ABLATIONS = ("Ours", "Ours-noaug", "Ours-last", "Ours-bce")
SEVERITIES = (0, 1, 2, 3, 4, 5)
PATH_LENGTHS = (50, 100, 200, 300, 400, 600)
DATA_SIZES = (40, 80, 120, 160)
UNSEEN_WORLD = 1000  # world seeds from here on are never used for training


@dataclass
class SuiteConfig:
    env_spec: EnvSpec = EnvSpec()
    world_seeds: tuple = (0, 1, 2, 3, 4)
    noise_preset: str = "locobot_like"
    k: float | None = None  # overrides the preset severity
    n_train: int = 160
    n_eval: int = 100
    forward_steps: int = 100
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    dr_factor: int = 5
    episodes_per_world: int = 4
    episode_steps: int = 1000
    seed: int = 0
    jobs: int = 1

    def noise(self, preset: str | None = None, k: float | None = None):
        act, odo = fit_default_locobot_like(preset or self.noise_preset)
        k = self.k if k is None else k
        return act, (odo if k is None else odo.with_k(float(k)))


@dataclass
class ArmResult:
    theta: LocalizerParams
    seconds: float
    log: object = None


# --- data ---------------------------------------------------------------------------

def collect_set(
    cfg: SuiteConfig,
    role: int,
    n: int,
    noise=None,
    forward_steps: int | None = None,
    worlds: Sequence[int] | None = None,
    condition: int = 0,
    preset: str | None = None,
) -> list[Trajectory]:
    """``n`` round trips spread round-robin over ``worlds``; trajectory i is seeded independently."""
    act, odo = noise if noise is not None else cfg.noise()
    worlds = tuple(cfg.world_seeds if worlds is None else worlds)
    steps = cfg.forward_steps if forward_steps is None else forward_steps
    name = {TRAIN: "train", EVAL: "eval", TESTTIME: "tt"}.get(role, str(role))
    todo = [
        CollectJob(
            worlds[i % len(worlds)], cfg.env_spec, act, odo, steps, (cfg.seed, role, condition, i),
            f"{name}-{condition}-{i:04d}", preset or cfg.noise_preset,
        )
        for i in range(n)
    ]
    return collect_many(todo, cfg.jobs)


def envs_of(cfg: SuiteConfig, trajs: Sequence[Trajectory]):
    return [cached_environment(t.env_seed, cfg.env_spec) for t in trajs]


# --- arms ---------------------------------------------------------------------------

def train_arm(arm: str, train: Sequence[Trajectory], cfg: SuiteConfig) -> ArmResult:
    t0 = time.perf_counter()
    identity = LocalizerParams.identity()
    ac = cfg.adapt
    if arm == "NA":
        return ArmResult(identity, 0.0)
    if arm == "GT":
        theta, lg = adapt_gt(identity, train, ac)
    elif arm == "DR":
        pool = [(s, cfg.env_spec) for s in cfg.world_seeds]
        theta, lg = adapt_dr(
            identity, pool, _DRSampler(cfg.noise_preset), replace(ac, rng_seed=ac.rng_seed + cfg.seed),
            n_trajectories=cfg.dr_factor * len(train), forward_steps=cfg.forward_steps, jobs=cfg.jobs,
        )
    elif arm.startswith("Ours"):
        variant = {
            "Ours": {},
            "Ours-noaug": {"crops_per_traj": 0},
            "Ours-last": {"supervision": "last_step"},
            "Ours-bce": {"loss_kind": "bce"},
        }[arm]
        theta, lg = adapt(identity, train, envs_of(cfg, train), replace(ac, **variant))
    else:
        raise ValueError(f"unknown arm {arm!r}")
    return ArmResult(theta, time.perf_counter() - t0, lg)


@dataclass(frozen=True)
class _DRSampler:
    base: str

    def __call__(self, rng):
        return sample_dr_noise(rng, self.base)


def _train_job(args):
    arm, train, cfg = args
    return train_arm(arm, train, replace(cfg, jobs=1))


def train_arms(arms: Sequence[str], train: Sequence[Trajectory], cfg: SuiteConfig) -> dict[str, ArmResult]:
    """Train independent arms, in parallel across arms when ``cfg.jobs > 1``."""
    res = pmap(_train_job, [(a, train, cfg) for a in arms], cfg.jobs)
    return dict(zip(arms, res))


# --- evaluation ---------------------------------------------------------------------

def _episode_job(args):
    theta, cfg, noise, world, e = args
    env = cached_environment(world, cfg.env_spec)
    r = run_episode(env, theta, "frontier", cfg.episode_steps, noise, random_stream(cfg.seed, EXPLORE, world, e))
    return r.coverage_ratio, r.coverage_area


def coverage(theta: LocalizerParams, cfg: SuiteConfig, noise=None) -> tuple[float, float]:
    """Mean coverage ratio (%) and area (m^2) over exploration episodes in every world."""
    noise = cfg.noise() if noise is None else noise
    items = [(theta, cfg, noise, w, e) for w in cfg.world_seeds for e in range(cfg.episodes_per_world)]
    out = np.array(pmap(_episode_job, items, cfg.jobs))
    return float(out[:, 0].mean()), float(out[:, 1].mean())


def _map_job(args):
    theta, traj, spec = args
    return metrics.trajectory_map_error(theta, traj, cached_environment(traj.env_seed, spec))


def map_mse(theta: LocalizerParams, trajs: Sequence[Trajectory], cfg: SuiteConfig) -> float:
    vals = pmap(_map_job, [(theta, t, cfg.env_spec) for t in trajs], cfg.jobs)
    return float(np.mean(vals))


def report(
    arm: str,
    theta: LocalizerParams,
    eval_trajs: Sequence[Trajectory],
    cfg: SuiteConfig,
    key: str,
    value,
    with_map: bool = False,
    with_coverage: bool = False,
    noise=None,
) -> EvalReport:
    xy, phi = metrics.pose_errors(theta, eval_trajs)
    mse = map_mse(theta, eval_trajs, cfg) if with_map else math.nan
    cov_r, cov_a = coverage(theta, cfg, noise) if with_coverage else (math.nan, math.nan)
    return EvalReport(arm, key, str(value), xy, phi, mse, cov_r, cov_a, cfg.seed)


# --- suites ---------------------------------------------------------------------------

@dataclass
class SuiteResult:
    reports: list
    thetas: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


def standard_suite(cfg: SuiteConfig, arms: Sequence[str] = ARMS, with_map=True, with_coverage=True) -> SuiteResult:
    train = collect_set(cfg, TRAIN, cfg.n_train)
    ev = collect_set(cfg, EVAL, cfg.n_eval)
    trained = train_arms(arms, train, cfg)
    reps = [
        report(a, trained[a].theta, ev, cfg, "preset", cfg.noise_preset, with_map, with_coverage) for a in arms
    ]
    return SuiteResult(
        reps, {a: r.theta for a, r in trained.items()}, {a: r.seconds for a, r in trained.items()},
        extras={"train": train, "eval": ev, "logs": {a: r.log for a, r in trained.items()}},
    )


def severity_sweep(cfg: SuiteConfig, arms: Sequence[str] = ("NA", "GT", "Ours"), k_values=SEVERITIES) -> SuiteResult:
    """Per severity: data at that k, every arm adapted separately, pose errors reported.

    All severities share the trajectory seeds (paired design): paths and
    actuation noise are identical across k, only the odometry noise is scaled.
    """
    reps, thetas = [], {}
    for k in k_values:
        noise = cfg.noise(k=k)
        train = collect_set(cfg, TRAIN, cfg.n_train, noise, condition=100)
        ev = collect_set(cfg, EVAL, cfg.n_eval, noise, condition=100)
        trained = train_arms(arms, train, replace(cfg, k=k))
        for a in arms:
            thetas[(a, k)] = trained[a].theta
            reps.append(report(a, trained[a].theta, ev, cfg, "k", k))
    return SuiteResult(reps, thetas)


def preset_sweep(cfg: SuiteConfig, presets: Sequence[str], arms: Sequence[str] = ("NA", "Ours")) -> SuiteResult:
    reps, thetas = [], {}
    for j, preset in enumerate(presets):
        noise = cfg.noise(preset)
        train = collect_set(cfg, TRAIN, cfg.n_train, noise, condition=200 + j, preset=preset)
        ev = collect_set(cfg, EVAL, cfg.n_eval, noise, condition=200 + j, preset=preset)
        trained = train_arms(arms, train, replace(cfg, noise_preset=preset))
        for a in arms:
            thetas[(a, preset)] = trained[a].theta
            reps.append(report(a, trained[a].theta, ev, cfg, "noise_preset", preset))
    return SuiteResult(reps, thetas)


def path_length_sweep(
    cfg: SuiteConfig, thetas: dict[str, LocalizerParams], lengths=PATH_LENGTHS, n_eval: int | None = None
) -> SuiteResult:
    """Evaluate parameters adapted on the standard trip length against other lengths."""
    n_eval = cfg.n_eval if n_eval is None else n_eval
    reps = []
    for L in lengths:
        ev = collect_set(cfg, EVAL, n_eval, forward_steps=L, condition=0 if L == cfg.forward_steps else 300 + L)
        for a, th in thetas.items():
            reps.append(report(a, th, ev, cfg, "path_len", L))
    return SuiteResult(reps, dict(thetas))


def datasize_suite(cfg: SuiteConfig, sizes=DATA_SIZES, arms: Sequence[str] = ("Ours",)) -> SuiteResult:
    """Adapt on the first n of one training pool for every n; NA is reported once per size."""
    train = collect_set(cfg, TRAIN, max(sizes))
    ev = collect_set(cfg, EVAL, cfg.n_eval)
    reps, thetas = [], {}
    na = metrics.pose_errors(LocalizerParams.identity(), ev)
    for n in sizes:
        reps.append(EvalReport("NA", "n_train", str(n), *na, seed=cfg.seed))
        trained = train_arms(arms, train[:n], cfg)
        for a in arms:
            thetas[(a, n)] = trained[a].theta
            reps.append(report(a, trained[a].theta, ev, cfg, "n_train", n))
    return SuiteResult(reps, thetas)


def testtime_suite(cfg: SuiteConfig, n_train: int = 20, n_eval: int = 80) -> SuiteResult:
    """Adaptation in one unseen world from a handful of round trips.

    Epochs scale with ``cfg.n_train / n_train`` so the run makes as many
    updates as the standard protocol does.
    """
    world = (UNSEEN_WORLD + cfg.seed,)
    train = collect_set(cfg, TESTTIME, n_train, worlds=world, condition=0)
    ev = collect_set(cfg, TESTTIME, n_eval, worlds=world, condition=1)
    epochs = cfg.adapt.epochs * max(1, round(cfg.n_train / n_train))
    ours = train_arm("Ours", train, replace(cfg, adapt=replace(cfg.adapt, epochs=epochs)))
    reps = [
        report("NA", LocalizerParams.identity(), ev, cfg, "testtime", f"{n_train}/{n_eval}"),
        report("Ours", ours.theta, ev, cfg, "testtime", f"{n_train}/{n_eval}"),
    ]
    return SuiteResult(reps, {"Ours": ours.theta}, {"Ours": ours.seconds})


def fwdbwd_suite(cfg: SuiteConfig, thetas: dict[str, LocalizerParams], n_eval: int | None = None) -> SuiteResult:
    """Mean per-step error curves along the round trip and the phase growth rates."""
    ev = collect_set(cfg, EVAL, cfg.n_eval if n_eval is None else n_eval)
    reps, curves, slopes = [], {}, {}
    for a, th in thetas.items():
        rows = [metrics.forward_backward_curve(th, t) for t in ev]
        mean = [
            (r0[0], float(np.mean([r[i][1] for r in rows])), float(np.mean([r[i][2] for r in rows])), r0[3])
            for i, r0 in enumerate(rows[0])
        ]
        curves[a] = mean
        slopes[a] = metrics.phase_slopes(th, ev)
        reps.append(report(a, th, ev, cfg, "curve", "round_trip"))
    return SuiteResult(reps, dict(thetas), curves=curves, extras={"slopes": slopes})


def explore_suite(cfg: SuiteConfig, thetas: dict[str, LocalizerParams]) -> SuiteResult:
    reps = []
    ev = collect_set(cfg, EVAL, cfg.n_eval)
    for a, th in thetas.items():
        reps.append(report(a, th, ev, cfg, "episode_steps", cfg.episode_steps, with_coverage=True))
    return SuiteResult(reps, dict(thetas))


def ablation_suite(cfg: SuiteConfig, arms: Sequence[str] = ("NA",) + ABLATIONS) -> SuiteResult:
    train = collect_set(cfg, TRAIN, cfg.n_train)
    ev = collect_set(cfg, EVAL, cfg.n_eval)
    trained = train_arms(arms, train, cfg)
    reps = [report(a, trained[a].theta, ev, cfg, "ablation", a) for a in arms]
    return SuiteResult(reps, {a: r.theta for a, r in trained.items()}, {a: r.seconds for a, r in trained.items()})
