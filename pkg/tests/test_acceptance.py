"""Acceptance suite: every criterion at its stated tolerance, one PASS/FAIL line each.

Run with pytest (lines are collected into a terminal summary section) or as a
script (``python tests/test_acceptance.py``), which prints the lines as they
come. Criterion 12 re-runs 1..11 with four workers and compares every number.
"""
from __future__ import annotations

import math
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import fd_agrees, fd_gradient, random_theta  # noqa: E402

from mapcal import experiments as ex  # noqa: E402
from mapcal import metrics  # noqa: E402
from mapcal.mapper import LocalizerParams, grad_consistency, reference_map  # noqa: E402
from mapcal.noise import fit_default_locobot_like, random_stream  # noqa: E402
from mapcal.policy import forward_policy_step  # noqa: E402
from mapcal.selfsup import AdaptConfig, CropTriple, adapt, collect_trajectory, make_segment, sample_crops  # noqa: E402
from mapcal.world import EnvSpec, generate_environment  # noqa: E402

IDENTITY = LocalizerParams.identity()
SLACK = 0.05  # "nondecreasing with 5% slack": next >= (1 - SLACK) * previous
REPORT: list[str] = []

pytestmark = pytest.mark.slow


@dataclass
class Outcome:
    number: int
    passed: bool
    detail: str
    seconds: float
    values: tuple = field(default=(), repr=False)  # everything the run produced, for the determinism check

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"criterion {self.number:>2} {tag}  {self.detail}  [{self.seconds:.1f} s]"


def nondecreasing(xs, slack=SLACK) -> bool:
    return all(b >= (1 - slack) * a for a, b in zip(xs, xs[1:]))


def fingerprint(reports, thetas=()) -> tuple:
    # repr keeps NaN fields comparable and spells floats exactly
    return tuple(repr(r) for r in reports) + tuple(th.flat().tobytes() for th in thetas)


# --- shared runs --------------------------------------------------------------------

_cache: dict = {}


def cached(key, fn):
    if key not in _cache:
        _cache[key] = fn()
    return _cache[key]


def cfg_for(jobs: int) -> ex.SuiteConfig:
    return ex.SuiteConfig(jobs=jobs)


@dataclass
class Standard:
    train: list
    eval: list
    thetas: dict
    seconds: dict
    reports: dict
    total: float


def standard(jobs: int) -> Standard:
    """NA, GT and Ours on the standard data, with map error and coverage for NA and Ours."""

    def run():
        cfg = cfg_for(jobs)
        t0 = time.perf_counter()
        train = ex.collect_set(cfg, ex.TRAIN, cfg.n_train)
        ev = ex.collect_set(cfg, ex.EVAL, cfg.n_eval)
        trained = ex.train_arms(("NA", "GT", "Ours"), train, cfg)
        reps = {
            a: ex.report(a, trained[a].theta, ev, cfg, "preset", cfg.noise_preset, a != "GT", a != "GT")
            for a in trained
        }
        thetas = {a: r.theta for a, r in trained.items()}
        return Standard(train, ev, thetas, {a: r.seconds for a, r in trained.items()}, reps, time.perf_counter() - t0)

    return cached(("standard", jobs), run)


# --- criteria ---------------------------------------------------------------------------

def criterion_1(jobs: int) -> Outcome:
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, fails, values = 0.0, 0, []
    kinds = [("mse", "stepwise"), ("bce", "stepwise"), ("mse", "last_step"), ("bce", "last_step")]
    envs = [generate_environment(s, EnvSpec()) for s in range(5)]
    act, odo = fit_default_locobot_like("locobot_like")
    for i in range(50):
        env = envs[i % 5]
        traj = collect_trajectory(env, forward_policy_step, int(rng.integers(5, 16)), act, odo, random_stream(77, i))
        theta = random_theta(rng, 0.005)
        crop = CropTriple.full(traj) if i % 3 == 0 else sample_crops(traj, 1, random_stream(78, i))[0]
        kind, sup = kinds[i % 4]
        seg = make_segment(traj, env, crop)
        ref = reference_map(theta, seg)
        g = grad_consistency(theta, seg, kind, sup, ref).grad.flat()
        ok, w = fd_agrees(g, fd_gradient(theta, seg, kind, sup, ref), rel=1e-3, abs_floor=1e-8)
        fails += not ok
        worst = max(worst, w)
        values.append(g.tobytes())
    secs = time.perf_counter() - t0
    passed = fails == 0 and secs <= 60
    return Outcome(1, passed, f"FD gradient: {50 - fails}/50 instances agree, worst rel err {worst:.2e}", secs, tuple(values))


def criterion_2(jobs: int) -> Outcome:
    t0 = time.perf_counter()
    cfg = cfg_for(jobs)
    clean = ex.collect_set(cfg, ex.TRAIN, 10, noise=fit_default_locobot_like("clean"), forward_steps=30, condition=900)
    envs = ex.envs_of(cfg, clean)
    loss = max(grad_consistency(IDENTITY, make_segment(t, e, CropTriple.full(t))).loss for t, e in zip(clean, envs))
    xy, phi = metrics.pose_errors(IDENTITY, clean)
    theta, _ = adapt(IDENTITY, clean, envs, AdaptConfig(epochs=1))
    drift = float(np.abs(theta.flat() - IDENTITY.flat()).max())
    secs = time.perf_counter() - t0
    passed = loss <= 1e-6 and xy <= 1e-9 and math.radians(phi) <= 1e-9 and drift <= 1e-6 and secs <= 30
    detail = f"noiseless: max loss {loss:.1e}, pose err {xy:.1e} m / {phi:.1e} deg, theta drift {drift:.1e}"
    return Outcome(2, passed, detail, secs, (loss, xy, phi, theta.flat().tobytes()))


def criterion_3(jobs: int) -> Outcome:
    s = standard(jobs)
    na, gt, ours = s.reports["NA"], s.reports["GT"], s.reports["Ours"]
    r_xy = ours.median_xy_m / na.median_xy_m
    r_phi = ours.median_phi_deg / na.median_phi_deg
    checks = [
        r_xy <= 0.5,
        r_phi <= 0.5,
        ours.map_mse < na.map_mse,
        ours.cov_ratio >= na.cov_ratio + 3.0,
        gt.median_xy_m <= ours.median_xy_m <= na.median_xy_m,
        s.total <= 600,
    ]
    detail = (
        f"NA {na.median_xy_m:.3f} m/{na.median_phi_deg:.2f} deg, GT {gt.median_xy_m:.3f} m, "
        f"Ours {ours.median_xy_m:.3f} m/{ours.median_phi_deg:.2f} deg (ratios {r_xy:.2f}, {r_phi:.2f}); "
        f"map {na.map_mse:.4f} -> {ours.map_mse:.4f}; coverage {na.cov_ratio:.2f}% -> {ours.cov_ratio:.2f}%"
    )
    return Outcome(3, all(checks), detail, s.total, fingerprint(s.reports.values(), s.thetas.values()))


def criterion_4(jobs: int) -> Outcome:
    s = standard(jobs)
    cfg = cfg_for(jobs)
    t0 = time.perf_counter()
    dr = ex.train_arm("DR", s.train, cfg)
    rep = ex.report("DR", dr.theta, s.eval, cfg, "preset", cfg.noise_preset)
    secs = time.perf_counter() - t0
    na, ours = s.reports["NA"].median_xy_m, s.reports["Ours"].median_xy_m
    passed = na > rep.median_xy_m > ours and secs <= 600
    detail = f"NA {na:.4f} > DR {rep.median_xy_m:.4f} > Ours {ours:.4f} m"
    return Outcome(4, passed, detail, secs, fingerprint([rep], [dr.theta]))


def criterion_5(jobs: int) -> Outcome:
    t0 = time.perf_counter()
    res = ex.severity_sweep(cfg_for(jobs), arms=("NA", "Ours"))
    secs = time.perf_counter() - t0
    by = {(r.arm, float(r.condition_value)): r.median_xy_m for r in res.reports}
    na = [by[("NA", float(k))] for k in ex.SEVERITIES]
    ours = [by[("Ours", float(k))] for k in ex.SEVERITIES]
    better = all(o < n for k, o, n in zip(ex.SEVERITIES, ours, na) if k >= 1)
    passed = better and nondecreasing(na) and secs <= 900
    detail = "k=0..5 NA " + " ".join(f"{v:.3f}" for v in na) + " | Ours " + " ".join(f"{v:.3f}" for v in ours)
    return Outcome(5, passed, detail, secs, fingerprint(res.reports, res.thetas.values()))


def criterion_6(jobs: int) -> Outcome:
    t0 = time.perf_counter()
    presets = ["constant_bias", "stochastic_bias", "motion_drift"]
    res = ex.preset_sweep(cfg_for(jobs), presets)
    secs = time.perf_counter() - t0
    by = {(r.arm, r.condition_value): r.median_xy_m for r in res.reports}
    ratios = [by[("Ours", p)] / by[("NA", p)] for p in presets]
    passed = all(r <= 0.5 for r in ratios) and secs <= 600
    detail = "Ours/NA " + ", ".join(f"{p} {r:.2f}" for p, r in zip(presets, ratios))
    return Outcome(6, passed, detail, secs, fingerprint(res.reports, res.thetas.values()))


def criterion_7(jobs: int) -> Outcome:
    s = standard(jobs)
    cfg = cfg_for(jobs)
    t0 = time.perf_counter()
    trained = ex.train_arms(("Ours-noaug", "Ours-last", "Ours-bce"), s.train, cfg)
    err = {a: metrics.pose_errors(r.theta, s.eval)[0] for a, r in trained.items()}
    err["Ours"] = s.reports["Ours"].median_xy_m
    secs = time.perf_counter() - t0
    passed = err["Ours"] <= err["Ours-noaug"] < err["Ours-last"] and err["Ours"] < err["Ours-bce"] and secs <= 600
    detail = ", ".join(f"{a} {err[a]:.3f}" for a in ex.ABLATIONS) + " m"
    values = tuple(err[a] for a in ex.ABLATIONS) + tuple(r.theta.flat().tobytes() for r in trained.values())
    return Outcome(7, passed, detail, secs, values)


def criterion_8(jobs: int) -> Outcome:
    s = standard(jobs)
    t0 = time.perf_counter()
    res = ex.path_length_sweep(cfg_for(jobs), {"NA": IDENTITY, "Ours": s.thetas["Ours"]})
    secs = time.perf_counter() - t0
    by = {(r.arm, int(r.condition_value)): r.median_xy_m for r in res.reports}
    na = [by[("NA", n)] for n in ex.PATH_LENGTHS]
    ours = [by[("Ours", n)] for n in ex.PATH_LENGTHS]
    passed = all(o < n for o, n in zip(ours, na)) and nondecreasing(na) and nondecreasing(ours)
    detail = "len 50..600 NA " + " ".join(f"{v:.3f}" for v in na) + " | Ours " + " ".join(f"{v:.3f}" for v in ours)
    return Outcome(8, passed, detail, secs, fingerprint(res.reports))


def criterion_9(jobs: int) -> Outcome:
    t0 = time.perf_counter()
    res = ex.testtime_suite(cfg_for(jobs))
    secs = time.perf_counter() - t0
    na, ours = res.reports
    ratio = ours.median_xy_m / na.median_xy_m
    passed = ratio <= 0.6 and res.seconds["Ours"] <= 150
    detail = f"unseen world: NA {na.median_xy_m:.3f} -> Ours {ours.median_xy_m:.3f} m (ratio {ratio:.2f}), adapt {res.seconds['Ours']:.1f} s"
    return Outcome(9, passed, detail, secs, fingerprint(res.reports, res.thetas.values()))


def criterion_10(jobs: int) -> Outcome:
    s = standard(jobs)
    t0 = time.perf_counter()
    gaps = {}
    for a in ("NA", "Ours"):
        f, b = metrics.phase_slopes(s.thetas[a], s.eval)
        gaps[a] = abs(b - f)
    secs = time.perf_counter() - t0
    passed = gaps["Ours"] < 0.5 * gaps["NA"]
    detail = f"|backward - forward| slope: NA {gaps['NA']:.2e}, Ours {gaps['Ours']:.2e} m/step"
    return Outcome(10, passed, detail, secs, (gaps["NA"], gaps["Ours"]))


def criterion_11(jobs: int) -> Outcome:
    s = standard(jobs)
    secs = s.seconds["Ours"]
    detail = f"160-trajectory adaptation {secs:.1f} s with {jobs} worker(s)"
    return Outcome(11, secs <= 300, detail, secs, (s.thetas["Ours"].flat().tobytes(),))


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8, criterion_9, criterion_10, criterion_11]


def outcome(number: int, jobs: int = 1) -> Outcome:
    def run():
        out = CRITERIA[number - 1](jobs)
        if jobs == 1:
            REPORT.append(out.line())
            print(out.line(), flush=True)
        return out

    return cached((number, jobs), run)


def criterion_12() -> Outcome:
    t0 = time.perf_counter()
    differ = []
    for n in range(1, len(CRITERIA) + 1):
        a, b = outcome(n, 1), outcome(n, 4)
        if a.values != b.values:
            differ.append(n)
    secs = time.perf_counter() - t0
    detail = "jobs 1 vs 4 bit-identical" if not differ else f"jobs 1 vs 4 differ on criteria {differ}"
    out = Outcome(12, not differ, detail, secs)
    REPORT.append(out.line())
    print(out.line(), flush=True)
    return out


# --- pytest entry points --------------------------------------------------------------------

@pytest.mark.parametrize("number", range(1, len(CRITERIA) + 1))
def test_criterion(number):
    out = outcome(number)
    assert out.passed, out.line()


def test_criterion_12_determinism():
    out = criterion_12()
    assert out.passed, out.line()


if __name__ == "__main__":
    for n in range(1, len(CRITERIA) + 1):
        outcome(n)
    criterion_12()
