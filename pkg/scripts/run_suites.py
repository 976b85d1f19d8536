"""Run the experiment suites and write one metrics CSV per suite.

    python scripts/run_suites.py --out results                 # everything
    python scripts/run_suites.py --out results standard ablate # a subset

The standard suite runs first; the path-length, forward/backward and
exploration suites reuse its NA and Ours parameters.
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from mapcal import experiments as ex
from mapcal import metrics
from mapcal.mapper import LocalizerParams

SUITES = ("standard", "severity", "presets", "pathlen", "datasize", "testtime", "fwdbwd", "ablate")
PRESETS = ("constant_bias", "stochastic_bias", "motion_drift")


def table(reports) -> str:
    rows = ["| arm | condition | xy (m) | phi (deg) | map MSE | coverage (%) |", "|---|---|---|---|---|---|"]
    for r in reports:
        rows.append(
            f"| {r.arm} | {r.condition_key}={r.condition_value} | {r.median_xy_m:.4f} | "
            f"{r.median_phi_deg:.3f} | {r.map_mse:.4f} | {r.cov_ratio:.2f} |"
        )
    return "\n".join(rows)


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("suites", nargs="*", help=f"any of {', '.join(SUITES)} (default: all)")
    p.add_argument("--out", default="results")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--quick", action="store_true", help="small sizes for a smoke run")
    args = p.parse_args()
    unknown = set(args.suites) - set(SUITES)
    if unknown:
        p.error(f"unknown suites {sorted(unknown)}")
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = ex.SuiteConfig(seed=args.seed, jobs=args.jobs)
    if args.quick:
        cfg = replace(cfg, n_train=16, n_eval=20, forward_steps=40, episodes_per_world=1, episode_steps=200)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    thetas = {"NA": LocalizerParams.identity()}

    def need_standard():
        if "Ours" not in thetas:
            res = ex.standard_suite(cfg)
            thetas["Ours"] = res.thetas["Ours"]
            for a, th in res.thetas.items():
                (out / f"theta_{a}.json").write_text(json.dumps(th.to_json(), indent=1))
            finish("standard", res)
        return thetas

    def finish(name, res):
        metrics.write_reports(out / f"{name}.csv", res.reports)
        print(f"\n## {name}\n\n{table(res.reports)}\n", flush=True)

    for name in args.suites or SUITES:
        t0 = time.perf_counter()
        if name == "standard":
            need_standard()
        elif name == "severity":
            finish(name, ex.severity_sweep(cfg))
        elif name == "presets":
            finish(name, ex.preset_sweep(cfg, PRESETS))
        elif name == "pathlen":
            finish(name, ex.path_length_sweep(cfg, need_standard()))
        elif name == "datasize":
            finish(name, ex.datasize_suite(cfg))
        elif name == "testtime":
            res = ex.testtime_suite(cfg)
            finish(name, res)
            print(f"test-time adaptation took {res.seconds['Ours']:.1f} s")
        elif name == "fwdbwd":
            res = ex.fwdbwd_suite(cfg, need_standard())
            for a, rows in res.curves.items():
                metrics.write_curve(out / f"curve_{a}.csv", rows)
            for a, (f, b) in res.extras["slopes"].items():
                print(f"{a}: forward slope {f:.3e}, backward slope {b:.3e} m/step")
            finish(name, res)
        elif name == "ablate":
            finish(name, ex.ablation_suite(cfg))
        logging.info("%s done in %.0f s", name, time.perf_counter() - t0)


if __name__ == "__main__":
    main()
