"""Pose, map and coverage metrics plus the report/CSV plumbing shared by the suites."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import mapper
from .geometry import Pose, relative_arr, transform_points, wrap_angle
from .mapper import LocalizerParams
from .world import Environment, SensorSpec

CSV_HEADER = [
    "arm",
    "condition_key",
    "condition_value",
    "median_xy_m",
    "median_phi_deg",
    "map_mse",
    "cov_ratio",
    "cov_area_m2",
    "seed",
]
CURVE_HEADER = ["t", "xy_err", "phi_err", "phase"]


@dataclass
class EvalReport:
    arm: str
    condition_key: str
    condition_value: str
    median_xy_m: float
    median_phi_deg: float
    map_mse: float = math.nan
    cov_ratio: float = math.nan
    cov_area_m2: float = math.nan
    seed: int = 0

    def __post_init__(self):
        if self.median_xy_m < 0 or self.median_phi_deg < 0:
            raise ValueError("median errors must be nonnegative")
        if not math.isnan(self.cov_ratio) and not 0.0 <= self.cov_ratio <= 100.0:
            raise ValueError("coverage ratio must lie in [0, 100]")

    def row(self) -> dict:
        return asdict(self)


def write_reports(path, reports: Sequence[EvalReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_HEADER, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow({k: _fmt(v) for k, v in r.row().items()})


def read_reports(path) -> list[EvalReport]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        out.append(
            EvalReport(
                r["arm"], r["condition_key"], r["condition_value"],
                *(float(r[k]) for k in CSV_HEADER[3:8]), int(r["seed"]),
            )
        )
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def lower_median(values) -> float:
    """Median with the lower middle element for even counts."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("median of an empty set")
    return float(v[(v.size - 1) // 2])


# --- pose errors ----------------------------------------------------------------

def estimated_poses(theta: LocalizerParams, traj) -> np.ndarray:
    """Localizer output along a recorded trajectory, anchored at its first reading."""
    deltas = relative_arr(traj.odom[:-1], traj.odom[1:])
    closure = mapper.closure_residuals(traj.odom, deltas)
    poses, _ = mapper.integrate(theta, traj.odom[0], deltas, traj.actions, closure)
    return poses


def step_errors(theta: LocalizerParams, traj) -> np.ndarray:
    """(T+1, 2) position (m) and absolute heading (rad) error at every step."""
    e = estimated_poses(theta, traj) - traj.gt
    return np.stack([np.hypot(e[:, 0], e[:, 1]), np.abs(wrap_angle(e[:, 2]))], axis=1)


def trajectory_errors(theta: LocalizerParams, trajs) -> np.ndarray:
    """Final-step (m, rad) error of every trajectory."""
    return np.array([step_errors(theta, t)[-1] for t in trajs]).reshape(-1, 2)


def pose_errors(theta: LocalizerParams, eval_trajs) -> tuple[float, float]:
    """Lower medians over trajectories of the final-step errors, in meters and degrees."""
    if len(eval_trajs) == 0:
        raise ValueError("pose_errors needs at least one trajectory")
    e = trajectory_errors(theta, eval_trajs)
    return lower_median(e[:, 0]), math.degrees(lower_median(e[:, 1]))


# --- map error ------------------------------------------------------------------

def gt_map_and_mask(env: Environment, traj, frame, sensor: SensorSpec = SensorSpec()):
    """Ground-truth occupancy over ``frame`` and the mask of cells sensed from gt poses."""
    h, w = frame.shape
    rr, cc = np.mgrid[:h, :w]
    x = frame.origin.x + cc * frame.resolution
    y = frame.origin.y + rr * frame.resolution
    occ = env.is_wall(x.ravel(), y.ravel()).reshape(h, w).astype(float)
    mask = np.zeros(h * w, dtype=bool)
    for ego, p in zip(traj.observations(env, sensor), traj.gt):
        pts = transform_points(p, ego.points)
        r, c = frame.cell_of(pts[:, 0], pts[:, 1])
        ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        mask[r[ok] * w + c[ok]] = True
    return occ, mask.reshape(h, w)


def trajectory_map_error(theta: LocalizerParams, traj, env: Environment, sensor: SensorSpec = SensorSpec()) -> float:
    obs = traj.observations(env, sensor)
    frame = traj.frame(env.resolution)
    est, _ = mapper.build_global_map(theta, obs, traj.odom, Pose.from_array(traj.odom[0]), traj.actions, frame)
    occ, mask = gt_map_and_mask(env, traj, frame, sensor)
    return float(np.mean((est.grid[mask] - occ[mask]) ** 2))


def map_error(theta: LocalizerParams, eval_trajs, envs, sensor: SensorSpec = SensorSpec()) -> float:
    """Mean over trajectories of the map MSE against ground truth on gt-sensed cells."""
    if len(eval_trajs) == 0:
        raise ValueError("map_error needs at least one trajectory")
    if isinstance(envs, Environment):
        envs = [envs] * len(eval_trajs)
    return float(np.mean([trajectory_map_error(theta, t, e, sensor) for t, e in zip(eval_trajs, envs)]))


# --- forward/backward error curves ------------------------------------------------

def forward_backward_curve(theta: LocalizerParams, traj) -> list[tuple[int, float, float, str]]:
    """Per-step (t, xy error m, phi error deg, phase) along a round trip."""
    err = step_errors(theta, traj)
    lo = traj.t_r + traj.turn_len
    out = []
    for t, (exy, ephi) in enumerate(err):
        phase = "forward" if t <= traj.t_r else ("turn" if t <= lo else "backward")
        out.append((t, float(exy), math.degrees(float(ephi)), phase))
    return out


def phase_slopes(theta: LocalizerParams, trajs) -> tuple[float, float]:
    """Mean least-squares growth rate (m/step) of the error each phase accumulates.

    The forward phase is measured from the start. The backward phase is measured
    from the true pose where the turn begins, so it holds the error picked up by
    the turn and the return leg only; otherwise forward-leg bias, which cancels on
    the way back, would mask it.
    """
    fwd, bwd = [], []
    for traj in trajs:
        err = step_errors(theta, traj)[:, 0]
        tf = np.arange(0, traj.t_r + 1)
        fwd.append(np.polyfit(tf, err[tf], 1)[0])
        tail = np.asarray(traj.odom[traj.t_r :])
        deltas = relative_arr(tail[:-1], tail[1:])
        closure = mapper.closure_residuals(tail, deltas)
        poses, _ = mapper.integrate(theta, traj.gt[traj.t_r], deltas, traj.actions[traj.t_r :], closure)
        e = np.hypot(*(poses[:, :2] - traj.gt[traj.t_r :, :2]).T)
        tb = np.arange(traj.turn_len, traj.T - traj.t_r + 1)
        bwd.append(np.polyfit(tb, e[tb], 1)[0])
    return float(np.mean(fwd)), float(np.mean(bwd))


def write_curve(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for t, exy, ephi, phase in rows:
            w.writerow([t, repr(exy), repr(ephi), phase])
