"""Pose and map error of the self-supervised arm against the weight-decay strength.

Reproduces the table behind the default ``AdaptConfig.weight_decay``: without
the pull toward the initial parameters the forward translation scale (nearly
invisible to round-trip consistency) drifts and the maps degrade.

    python scripts/sweep_weight_decay.py --values 0 10 100 300 1000
"""
from __future__ import annotations

import argparse
from dataclasses import replace

from mapcal import experiments as ex
from mapcal import metrics
from mapcal.mapper import LocalizerParams
from mapcal.noise import Action
from mapcal.world import CONTROLS


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--values", type=float, nargs="+", default=[0.0, 10.0, 100.0, 300.0, 1000.0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()

    cfg = ex.SuiteConfig(seed=args.seed, jobs=args.jobs)
    train = ex.collect_set(cfg, ex.TRAIN, cfg.n_train)
    ev = ex.collect_set(cfg, ex.EVAL, cfg.n_eval)
    u = CONTROLS[Action.FORWARD].as_array()
    na = metrics.pose_errors(LocalizerParams.identity(), ev)
    print(f"NA: {na[0]:.4f} m / {na[1]:.2f} deg, map {ex.map_mse(LocalizerParams.identity(), ev, cfg):.4f}")
    print("weight_decay,xy_m,phi_deg,map_mse,forward_dx")
    for wd in args.values:
        arm = ex.train_arm("Ours", train, replace(cfg, adapt=replace(cfg.adapt, weight_decay=wd)))
        xy, phi = metrics.pose_errors(arm.theta, ev)
        dx = arm.theta.correct(u, int(Action.FORWARD))[0] - u[0]
        print(f"{wd:g},{xy:.4f},{phi:.3f},{ex.map_mse(arm.theta, ev, cfg):.4f},{dx:+.4f}", flush=True)


if __name__ == "__main__":
    main()
