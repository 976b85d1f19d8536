"""SE(2) pose algebra.

Poses and deltas are small frozen value types; the hot paths in the mapper
work on plain ``(x, y, phi)`` float arrays through the ``*_arr`` helpers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Map an angle (or array of angles) into the half-open interval (-pi, pi].

    In-range values are returned untouched; scalar and array inputs share one
    formula so both paths round identically.
    """
    if isinstance(theta, np.ndarray):
        inside = (theta > -math.pi) & (theta <= math.pi)
        r = math.pi - np.mod(math.pi - theta, TWO_PI)
        return np.where(inside, theta, np.where(r <= -math.pi, r + TWO_PI, r))
    if -math.pi < theta <= math.pi:
        return theta
    r = math.pi - (math.pi - theta) % TWO_PI
    return r + TWO_PI if r <= -math.pi else r


@dataclass(frozen=True)
class PoseDelta:
    dx: float = 0.0
    dy: float = 0.0
    dphi: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dphi], dtype=float)

    @classmethod
    def from_array(cls, a) -> "PoseDelta":
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def __add__(self, other: "PoseDelta") -> "PoseDelta":
        return PoseDelta(self.dx + other.dx, self.dy + other.dy, self.dphi + other.dphi)


@dataclass(frozen=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    phi: float = 0.0

    def __post_init__(self):
        vals = (self.x, self.y, self.phi)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite pose {vals}")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "phi", wrap_angle(float(self.phi)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.phi], dtype=float)

    @classmethod
    def from_array(cls, a) -> "Pose":
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous transform of this pose."""
        c, s = math.cos(self.phi), math.sin(self.phi)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])


def compose(base: Pose, delta: PoseDelta) -> Pose:
    c, s = math.cos(base.phi), math.sin(base.phi)
    return Pose(
        base.x + c * delta.dx - s * delta.dy,
        base.y + s * delta.dx + c * delta.dy,
        base.phi + delta.dphi,
    )


def relative(a: Pose, b: Pose) -> PoseDelta:
    """Delta ``d`` in the frame of ``a`` such that ``compose(a, d) == b``."""
    c, s = math.cos(a.phi), math.sin(a.phi)
    ex, ey = b.x - a.x, b.y - a.y
    return PoseDelta(c * ex + s * ey, -s * ex + c * ey, wrap_angle(b.phi - a.phi))


def inverse(p: Pose) -> Pose:
    return Pose.from_array(relative_arr(p.as_array(), np.zeros(3)))


# --- array forms -----------------------------------------------------------

def compose_arr(p: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Vectorised compose over leading axes of ``(..., 3)`` arrays."""
    p = np.asarray(p, dtype=float)
    d = np.asarray(d, dtype=float)
    c, s = np.cos(p[..., 2]), np.sin(p[..., 2])
    out = np.empty(np.broadcast(p, d).shape)
    out[..., 0] = p[..., 0] + c * d[..., 0] - s * d[..., 1]
    out[..., 1] = p[..., 1] + s * d[..., 0] + c * d[..., 1]
    out[..., 2] = wrap_angle(p[..., 2] + d[..., 2])
    return out


def relative_arr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    ex, ey = b[..., 0] - a[..., 0], b[..., 1] - a[..., 1]
    out = np.empty(np.broadcast(a, b).shape)
    out[..., 0] = c * ex + s * ey
    out[..., 1] = -s * ex + c * ey
    out[..., 2] = wrap_angle(b[..., 2] - a[..., 2])
    return out


def transform_points(pose: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Map body-frame points ``(N, 2)`` into the world frame of ``pose``."""
    c, s = math.cos(pose[2]), math.sin(pose[2])
    out = np.empty_like(pts, dtype=float)
    out[:, 0] = pose[0] + c * pts[:, 0] - s * pts[:, 1]
    out[:, 1] = pose[1] + s * pts[:, 0] + c * pts[:, 1]
    return out


def to_body(pose: np.ndarray, pts: np.ndarray) -> np.ndarray:
    c, s = math.cos(pose[2]), math.sin(pose[2])
    ex = pts[:, 0] - pose[0]
    ey = pts[:, 1] - pose[1]
    out = np.empty((len(pts), 2))
    out[:, 0] = c * ex + s * ey
    out[:, 1] = -s * ex + c * ey
    return out
