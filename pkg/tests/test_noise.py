import math

import numpy as np
import pytest
from scipy import stats

from mapcal.geometry import Pose, PoseDelta
from mapcal.noise import (
    DEG,
    PRESETS,
    Action,
    ActuationNoiseParams,
    OdometryNoiseParams,
    fit_default_locobot_like,
    random_stream,
    read_odometry,
    sample_actuation_noise,
    sample_dr_noise,
    sample_odometry_noise,
)


def draws(params, action, n, seed=0):
    rng = random_stream(seed, 9)
    return np.array([sample_actuation_noise(params, action, rng).as_array() for _ in range(n)])


def test_zero_params_give_zero_noise():
    p = ActuationNoiseParams()
    for a in Action:
        assert np.all(draws(p, a, 5) == 0.0)


def test_no_drift_on_turns():
    p = ActuationNoiseParams(delta_c=PoseDelta(0.01, 0, 0), alpha=PoseDelta(0, 0.02, 0))
    assert np.allclose(draws(p, Action.TURN_LEFT, 3), [0.01, 0, 0], atol=0)
    fwd = draws(p, Action.FORWARD, 1)[0]
    assert np.allclose(fwd, [0.01, -0.02, 0.0])  # drift toward the right


def test_drift_sign_left():
    p = ActuationNoiseParams(alpha=PoseDelta(0, 0.02, 0.01), drift_sign="left")
    assert np.allclose(draws(p, Action.FORWARD, 1)[0], [0, 0.02, 0.01])


def test_forward_sample_mean_monte_carlo():
    act, _ = fit_default_locobot_like("stochastic_bias")
    act = ActuationNoiseParams(act.delta_c, act.mu_s, act.sigma_s, PoseDelta(0, 0.007, 0.3 * DEG))
    n = 100_000
    rng = random_stream(3)
    z = rng.standard_normal((n, 3))  # same draws the sampler would make, vectorised
    x = act.delta_c.as_array() + act.mu_s.as_array() + z @ act._factor.T + act.drift
    sd = np.sqrt(np.diag(act.sigma_s))
    expect = act.delta_c.as_array() + act.mu_s.as_array() + act.drift
    assert np.all(np.abs(x.mean(0) - expect) <= 3 * sd / math.sqrt(n))
    # the per-call sampler agrees with the vectorised form draw for draw
    rng = random_stream(3)
    first = [sample_actuation_noise(act, Action.FORWARD, rng).as_array() for _ in range(5)]
    assert np.allclose(first, x[:5], atol=1e-15)


def test_turn_noise_independent_of_alpha_ks():
    base = fit_default_locobot_like("stochastic_bias")[0]
    drift = ActuationNoiseParams(base.delta_c, base.mu_s, base.sigma_s, PoseDelta(0.02, 0.05, 0.1))
    a = draws(base, Action.TURN_RIGHT, 10_000, seed=1)
    b = draws(drift, Action.TURN_RIGHT, 10_000, seed=2)
    for j in range(3):
        assert stats.ks_2samp(a[:, j], b[:, j]).pvalue > 0.01


def test_non_psd_covariance_rejected():
    with pytest.raises(ValueError):
        ActuationNoiseParams(sigma_s=np.diag([1.0, -1.0, 0.0]))
    with pytest.raises(ValueError):
        OdometryNoiseParams([(1.0, np.zeros(3), np.array([[1, 2, 0], [2, 1, 0], [0, 0, 1.0]]))], 1.0)
    with pytest.raises(ValueError):
        OdometryNoiseParams([(0.5, np.zeros(3), np.eye(3))], 1.0)


def test_read_odometry_k0_exact():
    _, odo = fit_default_locobot_like("locobot_like")
    p = Pose(1.0, 2.0, 3.0)
    assert read_odometry(p, odo.with_k(0.0), random_stream(0)) == p


def test_single_component_mean_zero():
    odo = OdometryNoiseParams([(1.0, np.zeros(3), np.diag([1e-4, 4e-4, 1e-6]))], 1.0)
    e = sample_odometry_noise(odo, random_stream(4), 100_000)
    sd = np.sqrt([1e-4, 4e-4, 1e-6])
    assert np.all(np.abs(e.mean(0)) <= 3 * sd / math.sqrt(1e5))


def test_std_linear_in_k():
    _, odo = fit_default_locobot_like("locobot_like")
    n = 100_000
    base = None
    for k in range(6):
        rng = random_stream(11, k)
        p0 = np.zeros(3)
        eps = sample_odometry_noise(odo, rng, n)
        reading = p0 + k * eps
        var = reading.var(0)
        if k == 1:
            base = var
        if k == 0:
            assert np.all(var == 0)
        elif base is not None:
            assert np.all(np.abs(var / (k**2 * base) - 1) < 0.05)


def test_read_odometry_uses_k():
    _, odo = fit_default_locobot_like("locobot_like")
    p = Pose(0.0, 0.0, 0.0)
    r1 = read_odometry(p, odo.with_k(1.0), random_stream(7)).as_array()
    r3 = read_odometry(p, odo.with_k(3.0), random_stream(7)).as_array()
    assert np.allclose(r3[:2], 3 * r1[:2])


def test_presets():
    act, odo = fit_default_locobot_like("clean")
    assert odo.k == 0 and np.all(act.sigma_s == 0) and act.delta_c == PoseDelta() and act.alpha == PoseDelta()
    act, odo = fit_default_locobot_like("constant_bias")
    assert act.delta_c != PoseDelta() and np.all(act.sigma_s == 0) and act.alpha == PoseDelta()
    act, _ = fit_default_locobot_like("motion_drift")
    assert act.alpha != PoseDelta() and act.delta_c == PoseDelta() and np.all(act.sigma_s == 0)
    assert act.mu_s == PoseDelta()
    act, odo = fit_default_locobot_like("locobot_like")
    assert np.allclose(act.delta_c.as_array(), [0.010, 0.003, 0.2 * DEG])
    assert np.allclose(act.alpha.as_array(), [0, 0.007, 0.3 * DEG]) and act.drift_sign == "right"
    assert odo.k == 1.0 and [c[0] for c in odo.components] == [0.85, 0.15]
    with pytest.raises(KeyError):
        fit_default_locobot_like("nope")
    assert set(PRESETS) == {"clean", "locobot_like", "constant_bias", "stochastic_bias", "motion_drift"}


def test_params_dict_roundtrip():
    act, odo = fit_default_locobot_like("locobot_like")
    a2 = ActuationNoiseParams.from_dict(act.to_dict())
    assert a2.to_dict() == act.to_dict()
    assert OdometryNoiseParams.from_dict(odo.to_dict()).to_dict() == odo.to_dict()


def test_determinism():
    act, odo = fit_default_locobot_like("locobot_like")
    seq = [Action.FORWARD, Action.TURN_LEFT, Action.FORWARD]
    a = [sample_actuation_noise(act, s, random_stream(42, 1)).as_array() for s in seq]
    b = [sample_actuation_noise(act, s, random_stream(42, 1)).as_array() for s in seq]
    assert np.array_equal(a, b)
    assert np.array_equal(sample_odometry_noise(odo, random_stream(1), 10), sample_odometry_noise(odo, random_stream(1), 10))


def test_dr_sampler_ranges_and_degenerate():
    for i in range(50):
        act, odo = sample_dr_noise(random_stream(0, i))
        assert 0 <= odo.k <= 5
        assert np.all(np.abs(act.delta_c.as_array()) <= 2 * np.array([0.010, 0.003, 0.2 * DEG]) + 1e-15)
    act, odo = sample_dr_noise(random_stream(0), base="clean", k_max=0.0)
    assert odo.k == 0 and act.delta_c == PoseDelta() and np.all(act.sigma_s == 0)
