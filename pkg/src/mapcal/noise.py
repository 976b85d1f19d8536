"""Actuation and odometry noise models.

Actuation noise is the sum of a constant bias, a Gaussian stochastic bias and
a forward-only lateral drift. Odometry readings are absolute poses corrupted
by ``k`` times a Gaussian-mixture draw.

All sampling goes through an explicit ``RandomStream`` (a numpy ``Generator``
backed by the counter-based Philox bit generator).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from .geometry import Pose, PoseDelta, wrap_angle

RandomStream = np.random.Generator

DEG = math.pi / 180.0


class Action(IntEnum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2

    @property
    def short(self) -> str:
        return "FLR"[int(self)]

    @classmethod
    def parse(cls, s: str) -> "Action":
        s = s.strip().upper()
        for a in cls:
            if s in (a.name, a.short):
                return a
        raise ValueError(f"unknown action {s!r}")


def random_stream(seed: int, *keys: int) -> RandomStream:
    """Independent stream for ``(seed, *keys)``; same inputs give the same draws."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(int(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))


def _psd_factor(cov: np.ndarray, what: str) -> np.ndarray:
    cov = np.asarray(cov, dtype=float).reshape(3, 3)
    if not np.all(np.isfinite(cov)) or not np.allclose(cov, cov.T, atol=1e-15):
        raise ValueError(f"invalid-params: {what} covariance must be finite and symmetric")
    w, v = np.linalg.eigh(cov)
    if w.min() < -1e-12 * max(1.0, abs(w).max()):
        raise ValueError(f"invalid-params: {what} covariance is not positive semidefinite")
    return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class ActuationNoiseParams:
    delta_c: PoseDelta = PoseDelta()
    mu_s: PoseDelta = PoseDelta()
    sigma_s: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    alpha: PoseDelta = PoseDelta()
    drift_sign: str = "right"

    def __post_init__(self):
        if self.drift_sign not in ("left", "right"):
            raise ValueError("invalid-params: drift_sign must be 'left' or 'right'")
        object.__setattr__(self, "sigma_s", np.asarray(self.sigma_s, dtype=float).reshape(3, 3))
        object.__setattr__(self, "_factor", _psd_factor(self.sigma_s, "sigma_s"))

    @property
    def drift(self) -> np.ndarray:
        """Drift vector actually added on Forward, with the lateral sign applied."""
        s = 1.0 if self.drift_sign == "left" else -1.0
        a = self.alpha
        return np.array([a.dx, s * abs(a.dy), s * abs(a.dphi)])

    def scaled(self, factor: float) -> "ActuationNoiseParams":
        return replace(
            self,
            delta_c=PoseDelta.from_array(factor * self.delta_c.as_array()),
            mu_s=PoseDelta.from_array(factor * self.mu_s.as_array()),
            sigma_s=factor**2 * self.sigma_s,
            alpha=PoseDelta.from_array(factor * self.alpha.as_array()),
        )

    def to_dict(self) -> dict:
        return {
            "delta_c": list(self.delta_c.as_array()),
            "mu_s": list(self.mu_s.as_array()),
            "sigma_s": self.sigma_s.tolist(),
            "alpha": list(self.alpha.as_array()),
            "drift_sign": self.drift_sign,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActuationNoiseParams":
        return cls(
            delta_c=PoseDelta.from_array(d["delta_c"]),
            mu_s=PoseDelta.from_array(d["mu_s"]),
            sigma_s=np.array(d["sigma_s"], dtype=float),
            alpha=PoseDelta.from_array(d["alpha"]),
            drift_sign=d.get("drift_sign", "right"),
        )


@dataclass(frozen=True)
class OdometryNoiseParams:
    # each component: (weight, mean (3,), cov (3, 3))
    components: tuple = ()
    k: float = 0.0

    def __post_init__(self):
        if self.k < 0 or not math.isfinite(self.k):
            raise ValueError("invalid-params: severity k must be >= 0")
        comps = tuple(
            (float(w), np.asarray(m, dtype=float).reshape(3), np.asarray(c, dtype=float).reshape(3, 3))
            for w, m, c in self.components
        )
        if comps:
            weights = np.array([c[0] for c in comps])
            if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-9:
                raise ValueError("invalid-params: mixture weights must be positive and sum to 1")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "_factors", [_psd_factor(c[2], "odometry") for c in comps])

    def with_k(self, k: float) -> "OdometryNoiseParams":
        return OdometryNoiseParams(self.components, k)

    def scaled(self, factor: float) -> "OdometryNoiseParams":
        comps = [(w, factor * m, factor**2 * c) for w, m, c in self.components]
        return OdometryNoiseParams(comps, self.k)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "components": [
                {"weight": w, "mean": list(m), "cov": c.tolist()} for w, m, c in self.components
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OdometryNoiseParams":
        comps = [(c["weight"], c["mean"], c["cov"]) for c in d["components"]]
        return cls(comps, float(d["k"]))


def sample_actuation_noise(params: ActuationNoiseParams, action: Action, rng: RandomStream) -> PoseDelta:
    z = rng.standard_normal(3)
    eps = params.delta_c.as_array() + params.mu_s.as_array() + params._factor @ z
    if action == Action.FORWARD:
        eps = eps + params.drift
    return PoseDelta.from_array(eps)


def sample_odometry_noise(params: OdometryNoiseParams, rng: RandomStream, size: int | None = None) -> np.ndarray:
    """Draw ``eps_sen`` from the mixture; shape ``(3,)`` or ``(size, 3)``."""
    n = 1 if size is None else int(size)
    out = np.zeros((n, 3))
    if params.components:
        weights = np.array([c[0] for c in params.components])
        u = rng.random(n)
        which = np.minimum(np.searchsorted(np.cumsum(weights), u, side="right"), len(weights) - 1)
        z = rng.standard_normal((n, 3))
        for i, (_, mean, _) in enumerate(params.components):
            sel = which == i
            out[sel] = mean + z[sel] @ params._factors[i].T
    return out[0] if size is None else out


def read_odometry(true_pose: Pose, params: OdometryNoiseParams, rng: RandomStream) -> Pose:
    eps = sample_odometry_noise(params, rng)
    p = true_pose.as_array() + params.k * eps
    return Pose(p[0], p[1], wrap_angle(p[2]))


# --- presets ---------------------------------------------------------------
# Magnitudes are this package's own defaults; only the regimes (which terms are
# active) follow the actuation-noise variants being studied.

def _diag(*sd):
    return np.diag(np.square(sd))


_ODOM_MIXTURE = (
    (0.85, (0.0, 0.0, 0.0), _diag(0.01, 0.01, 0.5 * DEG)),
    (0.15, (0.0, 0.0, 0.0), _diag(0.03, 0.03, 1.5 * DEG)),
)

_BIAS = PoseDelta(0.010, 0.003, 0.2 * DEG)
_DRIFT = PoseDelta(0.0, 0.007, 0.3 * DEG)

PRESETS = ("clean", "locobot_like", "constant_bias", "stochastic_bias", "motion_drift")


def fit_default_locobot_like(preset: str = "locobot_like") -> tuple[ActuationNoiseParams, OdometryNoiseParams]:
    """Return the named (actuation, odometry) parameter bundle."""
    odo = OdometryNoiseParams(_ODOM_MIXTURE, 1.0)
    if preset == "clean":
        return ActuationNoiseParams(), OdometryNoiseParams(_ODOM_MIXTURE, 0.0)
    if preset == "locobot_like":
        act = ActuationNoiseParams(
            delta_c=_BIAS, sigma_s=_diag(0.002, 0.002, 0.05 * DEG), alpha=_DRIFT, drift_sign="right"
        )
    elif preset == "constant_bias":
        act = ActuationNoiseParams(delta_c=_BIAS)
    elif preset == "stochastic_bias":
        act = ActuationNoiseParams(mu_s=_BIAS, sigma_s=_diag(0.003, 0.003, 0.1 * DEG))
    elif preset == "motion_drift":
        act = ActuationNoiseParams(alpha=_DRIFT, drift_sign="right")
    else:
        raise KeyError(f"unknown noise preset {preset!r}; choose from {', '.join(PRESETS)}")
    return act, odo


def sample_dr_noise(rng: RandomStream, base: str = "locobot_like", k_max: float = 5.0):
    """Domain-randomisation draw: every default term scaled by U(0, 2), k ~ U(0, k_max)."""
    act, odo = fit_default_locobot_like(base)
    a = rng.uniform(0.0, 2.0, size=4)
    act = ActuationNoiseParams(
        delta_c=PoseDelta.from_array(a[0] * act.delta_c.as_array()),
        mu_s=PoseDelta.from_array(a[1] * act.mu_s.as_array()),
        sigma_s=a[2] ** 2 * act.sigma_s,
        alpha=PoseDelta.from_array(a[3] * act.alpha.as_array()),
        drift_sign=act.drift_sign,
    )
    return act, odo.with_k(float(rng.uniform(0.0, k_max)))
