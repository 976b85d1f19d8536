import csv
import math

import numpy as np
import pytest

from mapcal import mapper
from mapcal.geometry import Pose
from mapcal.mapper import LocalizerParams
from mapcal.metrics import (
    CSV_HEADER,
    EvalReport,
    forward_backward_curve,
    gt_map_and_mask,
    lower_median,
    map_error,
    phase_slopes,
    pose_errors,
    read_reports,
    trajectory_map_error,
    write_curve,
    write_reports,
)
from mapcal.noise import fit_default_locobot_like, random_stream
from mapcal.policy import forward_policy_step
from mapcal.selfsup import collect_trajectory

# pipeline self-oracles (world 0, streams (31, i), 40 forward steps, identity localizer)
FROZEN_NA_POSE = (0.3619592604667711, 7.262411610630159)  # locobot_like, 20 trajectories
FROZEN_CLEAN_MAP_FLOOR = 7.632089902779612e-28  # noiseless maps hit the rasterised walls up to roundoff

IDENTITY = LocalizerParams.identity()


def trips(env, preset, n, steps=40):
    act, odo = fit_default_locobot_like(preset)
    return [collect_trajectory(env, forward_policy_step, steps, act, odo, random_stream(31, i)) for i in range(n)]


@pytest.fixture(scope="module")
def na_trips(env):
    return trips(env, "locobot_like", 20)


@pytest.fixture(scope="module")
def clean_trips(env):
    return trips(env, "clean", 3)


def test_lower_median():
    assert lower_median([0.1, 0.15, 0.2]) == 0.15
    assert lower_median([4.0, 1.0, 3.0, 2.0]) == 2.0
    assert lower_median([7.0]) == 7.0
    with pytest.raises(ValueError):
        lower_median([])


def test_zero_noise_pose_errors(clean_trips):
    assert pose_errors(IDENTITY, clean_trips) == (0.0, 0.0)
    with pytest.raises(ValueError):
        pose_errors(IDENTITY, [])


def test_median_over_trajectories(na_trips):
    finals = []
    for t in na_trips:
        e = t.odom[-1] - t.gt[-1]  # identity localizer reproduces the odometry
        finals.append((math.hypot(e[0], e[1]), abs(math.remainder(e[2], 2 * math.pi))))
    finals = np.array(finals)
    xy, phi = pose_errors(IDENTITY, na_trips)
    assert xy == pytest.approx(sorted(finals[:, 0])[9], abs=1e-12)
    assert phi == pytest.approx(math.degrees(sorted(finals[:, 1])[9]), abs=1e-9)


def test_na_pose_error_regression(na_trips):
    xy, phi = pose_errors(IDENTITY, na_trips)
    assert xy == pytest.approx(FROZEN_NA_POSE[0], rel=1e-9)
    assert phi == pytest.approx(FROZEN_NA_POSE[1], rel=1e-9)


def test_clean_map_error_floor(env, clean_trips):
    assert map_error(IDENTITY, clean_trips, env) == pytest.approx(FROZEN_CLEAN_MAP_FLOOR, abs=1e-20)
    with pytest.raises(ValueError):
        map_error(IDENTITY, [], env)


def test_identical_maps_zero():
    a = np.random.default_rng(0).random((20, 20))
    assert mapper.map_mse(a, a.copy()) == 0.0


def test_noisy_map_error_positive_and_masked(env, na_trips):
    t = na_trips[0]
    err = trajectory_map_error(IDENTITY, t, env)
    assert 0.0 < err < 1.0
    frame = t.frame(env.resolution)
    occ, mask = gt_map_and_mask(env, t, frame)
    # the mask is exactly the union of cells sensed from the true poses
    cells = set()
    for ego, p in zip(t.observations(env), t.gt):
        pts = ego.points @ np.array([[math.cos(p[2]), math.sin(p[2])], [-math.sin(p[2]), math.cos(p[2])]]) + p[:2]
        r, c = frame.cell_of(pts[:, 0], pts[:, 1])
        cells.update(zip(r.tolist(), c.tolist()))
    assert mask.sum() == len(cells)
    assert set(map(tuple, np.argwhere(mask).tolist())) == cells
    # walls in the ground-truth raster agree with the environment
    rr, cc = np.nonzero(occ)
    x, y = frame.origin.x + cc * frame.resolution, frame.origin.y + rr * frame.resolution
    assert env.is_wall(x, y).all()


def test_curve_zero_noise_and_phases(clean_trips, tmp_path):
    t = clean_trips[0]
    rows = forward_backward_curve(IDENTITY, t)
    assert len(rows) == t.T + 1
    assert all(r[1] == 0.0 and r[2] == 0.0 for r in rows)
    phases = [r[3] for r in rows]
    assert phases.count("forward") == t.t_r + 1
    assert phases.count("turn") == t.turn_len
    assert phases.count("backward") == t.T - t.t_r - t.turn_len
    path = tmp_path / "curve.csv"
    write_curve(path, rows)
    lines = list(csv.reader(path.open()))
    assert lines[0] == ["t", "xy_err", "phi_err", "phase"]
    assert len(lines) == t.T + 2


def test_na_backward_slope_exceeds_forward(na_trips):
    fwd, bwd = phase_slopes(IDENTITY, na_trips)
    assert bwd > fwd


def test_report_csv_round_trip(tmp_path):
    reps = [
        EvalReport("NA", "k", "1.0", 0.25, 3.5, 0.1, 80.0, 40.5, 0),
        EvalReport("Ours", "k", "1.0", 0.1, 1.25, seed=3),
    ]
    path = tmp_path / "m.csv"
    write_reports(path, reps)
    assert path.read_text().splitlines()[0] == ",".join(CSV_HEADER)
    back = read_reports(path)
    assert back[0] == reps[0]
    assert back[1].arm == "Ours" and math.isnan(back[1].map_mse) and back[1].seed == 3


def test_report_validation():
    with pytest.raises(ValueError):
        EvalReport("NA", "k", "1", -0.1, 0.0)
    with pytest.raises(ValueError):
        EvalReport("NA", "k", "1", 0.1, 0.0, cov_ratio=101.0)
