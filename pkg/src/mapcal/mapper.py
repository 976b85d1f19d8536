"""Localizer, differentiable map splatting, fusion and the consistency loss.

Occupancy fusion is noisy-or over every bilinear deposit,
``M = 1 - prod_d (1 - v_d * w_d)``, so a fused map does not depend on the order
in which observations arrive. Gradients of the map-consistency loss with
respect to the localizer parameters are accumulated by hand in reverse mode:
loss -> per-step fused maps -> deposits -> bilinear weights -> poses ->
pose chain -> (A, b).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, PoseDelta, compose_arr, relative_arr, transform_points, wrap_angle
from .noise import Action
from .world import EgoMap

log = logging.getLogger(__name__)

N_ACTIONS = 3
BCE_EPS = 1e-6
MAP_EXTENT = 24.0
MAP_RESOLUTION = 0.05


# --- localizer ---------------------------------------------------------------

@dataclass
class LocalizerParams:
    """Per-action affine correction ``A[a] @ delta + b[a]`` of odometry deltas."""

    A: np.ndarray = field(default_factory=lambda: np.tile(np.eye(3), (N_ACTIONS, 1, 1)))
    b: np.ndarray = field(default_factory=lambda: np.zeros((N_ACTIONS, 3)))

    def __post_init__(self):
        self.A = np.array(self.A, dtype=float).reshape(N_ACTIONS, 3, 3)
        self.b = np.array(self.b, dtype=float).reshape(N_ACTIONS, 3)

    @classmethod
    def identity(cls) -> "LocalizerParams":
        return cls()

    @classmethod
    def zeros(cls) -> "LocalizerParams":
        return cls(np.zeros((N_ACTIONS, 3, 3)), np.zeros((N_ACTIONS, 3)))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.A.ravel(), self.b.ravel()])

    @classmethod
    def from_flat(cls, v) -> "LocalizerParams":
        v = np.asarray(v, dtype=float)
        return cls(v[:27].reshape(N_ACTIONS, 3, 3), v[27:36].reshape(N_ACTIONS, 3))

    def copy(self) -> "LocalizerParams":
        return LocalizerParams(self.A.copy(), self.b.copy())

    def correct(self, delta: np.ndarray, action: int) -> np.ndarray:
        return self.A[action] @ delta + self.b[action]

    def to_json(self) -> dict:
        names = [a.name for a in Action]
        return {
            "format_version": 1,
            "A": {n: self.A[i].tolist() for i, n in enumerate(names)},
            "b": {n: self.b[i].tolist() for i, n in enumerate(names)},
        }

    @classmethod
    def from_json(cls, d: dict) -> "LocalizerParams":
        if d.get("format_version") != 1:
            raise ValueError("unsupported localizer format_version")
        names = [a.name for a in Action]
        return cls(np.array([d["A"][n] for n in names]), np.array([d["b"][n] for n in names]))


Gradient = LocalizerParams  # same layout: dL/dA, dL/db


def localize_step(theta: LocalizerParams, prev_est: Pose, odom_delta: PoseDelta, action: Action) -> Pose:
    d = theta.correct(odom_delta.as_array(), int(action))
    return Pose.from_array(compose_arr(prev_est.as_array(), d))


def odometry_deltas(odom: np.ndarray) -> np.ndarray:
    """Relative deltas between consecutive absolute odometry readings, ``(n-1, 3)``."""
    odom = np.asarray(odom, dtype=float)
    return relative_arr(odom[:-1], odom[1:])


def closure_residuals(odom: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """``odom[i+1] - compose(odom[i], deltas[i])``: round-off left by re-integration."""
    c = np.asarray(odom[1:], dtype=float) - compose_arr(odom[:-1], deltas)
    c[:, 2] = wrap_angle(c[:, 2])
    return c


def integrate(theta: LocalizerParams, anchor: np.ndarray, deltas: np.ndarray, actions: np.ndarray, closure=None):
    """Pose chain from ``anchor``; returns estimates ``(n+1, 3)`` and the corrected deltas.

    ``closure`` (per-step constants from :func:`closure_residuals`) makes the
    identity localizer reproduce the odometry readings bit for bit.
    """
    n = len(deltas)
    poses = np.empty((n + 1, 3))
    poses[0] = anchor
    acts = np.asarray(actions, dtype=np.int64)
    corr = np.einsum("nij,nj->ni", theta.A[acts], deltas) + theta.b[acts]
    cl = np.zeros((n, 3)) if closure is None else closure
    x, y, phi = float(anchor[0]), float(anchor[1]), float(anchor[2])
    for i in range(n):
        dx, dy, dp = corr[i]
        c, s = math.cos(phi), math.sin(phi)
        x = (x + c * dx - s * dy) + cl[i, 0]
        y = (y + s * dx + c * dy) + cl[i, 1]
        phi = wrap_angle(wrap_angle(phi + dp) + cl[i, 2])
        poses[i + 1, 0], poses[i + 1, 1], poses[i + 1, 2] = x, y, phi
    return poses, corr


def integrate_backward(theta, poses, corr, deltas, actions, pose_bar) -> LocalizerParams:
    """Adjoint of :func:`integrate` given ``pose_bar`` = dL/d(poses[i]), ``(n+1, 3)``."""
    gA = np.zeros((N_ACTIONS, 3, 3))
    gb = np.zeros((N_ACTIONS, 3))
    carry = np.zeros(3)
    n = len(deltas)
    for i in range(n, 0, -1):
        pb = carry + pose_bar[i]
        phi = poses[i - 1, 2]
        c, s = math.cos(phi), math.sin(phi)
        dx, dy, _ = corr[i - 1]
        dbar = np.array([c * pb[0] + s * pb[1], -s * pb[0] + c * pb[1], pb[2]])
        a = int(actions[i - 1])
        gA[a] += np.outer(dbar, deltas[i - 1])
        gb[a] += dbar
        carry = np.array(
            [pb[0], pb[1], pb[2] + pb[0] * (-s * dx - c * dy) + pb[1] * (c * dx - s * dy)]
        )
    return LocalizerParams(gA, gb)


# --- global maps -------------------------------------------------------------

@dataclass(eq=False)
class GlobalMap:
    grid: np.ndarray
    seen: np.ndarray
    resolution: float
    origin: Pose  # world position of the centre of cell (0, 0)
    dropped_mass: float = 0.0

    @classmethod
    def empty(cls, center_xy, extent: float = MAP_EXTENT, resolution: float = MAP_RESOLUTION) -> "GlobalMap":
        n = int(round(extent / resolution))
        ox = round((center_xy[0] - extent / 2) / resolution) * resolution
        oy = round((center_xy[1] - extent / 2) / resolution) * resolution
        return cls(np.zeros((n, n)), np.zeros((n, n)), resolution, Pose(ox, oy, 0.0))

    def like(self, grid=None, seen=None) -> "GlobalMap":
        return GlobalMap(
            np.zeros_like(self.grid) if grid is None else grid,
            np.zeros_like(self.seen) if seen is None else seen,
            self.resolution,
            self.origin,
        )

    @property
    def shape(self):
        return self.grid.shape

    @property
    def extent(self) -> tuple[float, float]:
        h, w = self.grid.shape
        return w * self.resolution, h * self.resolution

    def cell_of(self, x, y):
        r = np.rint((np.asarray(y) - self.origin.y) / self.resolution).astype(np.int64)
        c = np.rint((np.asarray(x) - self.origin.x) / self.resolution).astype(np.int64)
        return r, c

    def to_pgm(self, path, channel: str = "grid") -> None:
        data = getattr(self, channel)
        img = np.flipud((255 * (1.0 - np.clip(data, 0, 1))).round().astype(np.uint8))
        h, w = img.shape
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(img.tobytes())

    def to_csv(self, path, channel: str = "grid") -> None:
        np.savetxt(path, getattr(self, channel), delimiter=",", fmt="%.17g")


def bilinear(world_pts: np.ndarray, origin: Pose, resolution: float, shape, with_grad: bool = False):
    """Bilinear deposits of world points onto the map lattice.

    Returns flat cell index ``(N, 4)``, weights ``(N, 4)``, in-bounds mask
    ``(N, 4)`` and, optionally, d(weight)/d(world x, y) as ``(N, 4, 2)``.
    """
    u = (world_pts[:, 0] - origin.x) / resolution
    v = (world_pts[:, 1] - origin.y) / resolution
    c0 = np.floor(u)
    r0 = np.floor(v)
    fx = u - c0
    fy = v - r0
    c0 = c0.astype(np.int64)
    r0 = r0.astype(np.int64)
    h, w = shape
    cols = np.stack([c0, c0 + 1, c0, c0 + 1], axis=1)
    rows = np.stack([r0, r0, r0 + 1, r0 + 1], axis=1)
    wx = np.stack([1 - fx, fx, 1 - fx, fx], axis=1)
    wy = np.stack([1 - fy, 1 - fy, fy, fy], axis=1)
    weights = wx * wy
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    flat = np.where(inside, rows * w + cols, 0)
    if not with_grad:
        return flat, weights, inside
    sx = np.array([-1.0, 1.0, -1.0, 1.0]) / resolution
    sy = np.array([-1.0, -1.0, 1.0, 1.0]) / resolution
    dw = np.stack([sx[None, :] * wy, sy[None, :] * wx], axis=2)
    return flat, weights, inside, dw


def _noisy_or(n_cells: int, flat: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """``1 - prod(1 - vals)`` per cell over all deposits (zero factors handled exactly)."""
    f = 1.0 - vals
    zero = f <= 0.0
    logs = np.log(np.where(zero, 1.0, f))
    s = np.bincount(flat, weights=logs, minlength=n_cells)
    z = np.bincount(flat, weights=zero.astype(float), minlength=n_cells)
    return np.where(z > 0, 1.0, -np.expm1(s))


def _fuse_into(target: GlobalMap, flat_occ, val_occ, flat_seen, val_seen) -> GlobalMap:
    n = target.grid.size
    occ = _noisy_or(n, flat_occ, val_occ).reshape(target.shape)
    seen = _noisy_or(n, flat_seen, val_seen).reshape(target.shape)
    out = target.like(
        1.0 - (1.0 - target.grid) * (1.0 - occ),
        1.0 - (1.0 - target.seen) * (1.0 - seen),
    )
    return out


def _deposits(ego: EgoMap, pose: np.ndarray, target: GlobalMap):
    pts = transform_points(pose, ego.points)
    flat, wts, inside = bilinear(pts, target.origin, target.resolution, target.shape)
    occ = ego.occ[:, None] * wts
    seen = wts
    total = float(occ.sum())
    dropped = float(occ[~inside].sum())
    return flat[inside], occ[inside], seen[inside], total, dropped


def splat_egomap(ego: EgoMap, pose: Pose, target: GlobalMap) -> GlobalMap:
    """Transform ``ego`` by ``pose`` and noisy-or fuse it into a copy of ``target``."""
    if not math.isclose(ego.resolution, target.resolution, rel_tol=1e-12):
        raise ValueError("resolution mismatch between egocentric and global map")
    flat, occ, seen, total, dropped = _deposits(ego, pose.as_array(), target)
    out = _fuse_into(target, flat, occ, flat, seen)
    out.dropped_mass = target.dropped_mass + dropped
    if total > 0 and dropped / total > 0.01:
        log.warning("splat dropped %.1f%% of occupancy mass outside the map extent", 100 * dropped / total)
    return out


def splat_pose_vjp(ego: EgoMap, pose: Pose, target: GlobalMap, upstream: np.ndarray) -> np.ndarray:
    """d(sum(upstream * splat(ego, pose, target).grid)) / d(x, y, phi)."""
    p = pose.as_array()
    pts = transform_points(p, ego.points)
    flat, wts, inside, dw = bilinear(pts, target.origin, target.resolution, target.shape, with_grad=True)
    v = ego.occ[:, None] * np.ones_like(wts)
    f = np.where(inside, 1.0 - v * wts, 1.0)
    n = target.grid.size
    zero = f <= 0.0
    logs = np.log(np.where(zero, 1.0, f))
    fl = np.where(inside, flat, 0)
    s = np.bincount(fl[inside], weights=logs[inside], minlength=n)
    z = np.bincount(fl[inside], weights=zero[inside].astype(float), minlength=n)
    others = np.where(zero, np.where(z[fl] == 1, np.exp(s[fl]), 0.0), np.where(z[fl] == 0, np.exp(s[fl] - logs), 0.0))
    # out = 1 - (1 - T) * prod f  ->  d out / d f_d = -(1 - T) * others_d
    up = upstream.ravel()[fl] * (1.0 - target.grid.ravel()[fl])
    fbar = -up * others
    wbar = np.where(inside, -v * fbar, 0.0)
    qbar = np.einsum("nk,nkj->nj", wbar, dw)
    rel = pts - p[:2]
    return np.array([qbar[:, 0].sum(), qbar[:, 1].sum(), (-qbar[:, 0] * rel[:, 1] + qbar[:, 1] * rel[:, 0]).sum()])


def build_global_map(
    theta: LocalizerParams,
    obs,
    odom,
    start_est: Pose,
    actions,
    target: GlobalMap | None = None,
) -> tuple[GlobalMap, list[Pose]]:
    """Localize along the odometry and fuse every observation at its estimated pose.

    ``actions[i]`` is the action taken between ``odom[i]`` and ``odom[i+1]``.
    """
    obs = list(obs)
    odom = np.asarray([o.as_array() if isinstance(o, Pose) else o for o in odom], dtype=float)
    if len(obs) != len(odom) or len(actions) != len(odom) - 1 or len(obs) < 1:
        raise ValueError("length mismatch: need len(obs) == len(odom) == len(actions) + 1 >= 1")
    deltas = odometry_deltas(odom)
    closure = closure_residuals(odom, deltas) if np.allclose(start_est.as_array(), odom[0]) else None
    poses, _ = integrate(theta, start_est.as_array(), deltas, np.asarray(actions, dtype=int), closure)
    if target is None:
        target = GlobalMap.empty(poses[0, :2], MAP_EXTENT, obs[0].resolution)
    flats, occs, seens = [], [], []
    total = dropped = 0.0
    for ego, p in zip(obs, poses):
        f, o, s, t, d = _deposits(ego, p, target)
        flats.append(f), occs.append(o), seens.append(s)
        total += t
        dropped += d
    flat = np.concatenate(flats)
    out = _fuse_into(target, flat, np.concatenate(occs), flat, np.concatenate(seens))
    out.dropped_mass = target.dropped_mass + dropped
    if total > 0 and dropped / total > 0.01:
        log.warning("map build dropped %.1f%% of occupancy mass outside the map extent", 100 * dropped / total)
    return out, [Pose.from_array(p) for p in poses]


# --- plain map losses ----------------------------------------------------------

def _grid(m):
    return m.grid if isinstance(m, GlobalMap) else np.asarray(m, dtype=float)


def map_mse(a, b) -> float:
    ga, gb = _grid(a), _grid(b)
    if ga.shape != gb.shape:
        raise ValueError("shape mismatch")
    return float(np.mean((ga - gb) ** 2))


def map_bce(a, b, eps: float = BCE_EPS) -> float:
    """Mean binary cross-entropy of prediction ``b`` against target ``a``."""
    ga, gb = _grid(a), _grid(b)
    if ga.shape != gb.shape:
        raise ValueError("shape mismatch")
    p = np.clip(gb, eps, 1 - eps)
    return float(np.mean(-(ga * np.log(p) + (1 - ga) * np.log1p(-p))))


# --- map-consistency loss -----------------------------------------------------

@dataclass(eq=False)
class Segment:
    """Everything the consistency loss needs for one (crop of a) round trip.

    Local index 0 is the crop start; observations ``0..n_ref-1`` build the
    reference map and ``n_ref..n`` the comparison maps. ``mask_cells[j]`` holds
    the flat map cells observed at comparison step ``j`` when placed at the raw
    odometry pose; it fixes where the maps are compared and does not depend on
    the localizer.
    """

    anchor: np.ndarray
    deltas: np.ndarray
    actions: np.ndarray
    occ_points: list
    occ_values: list
    n_ref: int
    mask_cells: list
    frame: GlobalMap
    closure: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.deltas)


def _point_loss(kind: str, f: np.ndarray, b: np.ndarray) -> np.ndarray:
    if kind == "mse":
        return (f - b) ** 2
    p = np.clip(b, BCE_EPS, 1 - BCE_EPS)
    return -(f * np.log(p) + (1 - f) * np.log1p(-p))


def _point_dloss(kind: str, f: np.ndarray, b: np.ndarray) -> np.ndarray:
    if kind == "mse":
        return 2.0 * (b - f)
    inside = (b > BCE_EPS) & (b < 1 - BCE_EPS)
    p = np.clip(b, BCE_EPS, 1 - BCE_EPS)
    return np.where(inside, (p - f) / (p * (1 - p)), 0.0)


def reference_map(theta: LocalizerParams, seg: Segment) -> np.ndarray:
    """Flat occupancy of the reference map (a constant snapshot for the loss)."""
    poses, _ = integrate(theta, seg.anchor, seg.deltas, seg.actions, seg.closure)
    return _occupancy(seg, poses, range(seg.n_ref))


def _occupancy(seg: Segment, poses: np.ndarray, steps) -> np.ndarray:
    fr = seg.frame
    flats, vals = [], []
    for j in steps:
        pts = transform_points(poses[j], seg.occ_points[j])
        flat, wts, inside = bilinear(pts, fr.origin, fr.resolution, fr.shape)
        flats.append(flat[inside])
        vals.append((seg.occ_values[j][:, None] * wts)[inside])
    if not flats:
        return np.zeros(fr.grid.size)
    return _noisy_or(fr.grid.size, np.concatenate(flats), np.concatenate(vals))


@dataclass
class ConsistencyResult:
    loss: float
    grad: LocalizerParams | None
    per_step: np.ndarray  # loss term of every comparison step (before supervision weighting)
    poses: np.ndarray


def grad_consistency(
    theta: LocalizerParams,
    seg: Segment,
    loss_kind: str = "mse",
    supervision: str = "stepwise",
    reference: np.ndarray | None = None,
    need_grad: bool = True,
    freeze_anchor: bool = False,
) -> ConsistencyResult:
    """Summed per-step map-consistency loss and its gradient in ``theta``.

    The reference occupancy is a constant: pass ``reference`` to supply the
    snapshot explicitly, otherwise it is built from ``theta`` without tracking
    derivatives. With ``freeze_anchor`` the pose estimate at the pivot (the last
    reference step) is a constant too, so only the deltas after the pivot
    receive gradient.
    """
    if loss_kind not in ("mse", "bce"):
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if supervision not in ("stepwise", "last_step"):
        raise ValueError(f"unknown supervision {supervision!r}")
    fr = seg.frame
    n_cells = fr.grid.size
    poses, corr = integrate(theta, seg.anchor, seg.deltas, seg.actions, seg.closure)
    if not np.all(np.isfinite(poses)):
        nan = LocalizerParams.from_flat(np.full(36, np.nan)) if need_grad else None
        return ConsistencyResult(math.nan, nan, np.full(seg.n - seg.n_ref + 1, np.nan), poses)
    F = reference_map(theta, seg) if reference is None else np.asarray(reference, dtype=float).ravel()
    steps = list(range(seg.n_ref, seg.n + 1))
    nb = len(steps)
    if nb == 0:
        raise ValueError("segment has no comparison steps")

    # deposits of every comparison step
    sid, flats, wts, ins, dws, vals, rels = [], [], [], [], [], [], []
    for j, step in enumerate(steps):
        pts = transform_points(poses[step], seg.occ_points[step])
        flat, w, inside, dw = bilinear(pts, fr.origin, fr.resolution, fr.shape, with_grad=True)
        sid.append(np.full(len(pts), j))
        flats.append(flat), wts.append(w), ins.append(inside), dws.append(dw)
        vals.append(seg.occ_values[step])
        rels.append(pts - poses[step, :2])
    sid = np.concatenate(sid)
    flat = np.concatenate(flats)
    w = np.concatenate(wts)
    inside = np.concatenate(ins)
    dw = np.concatenate(dws)
    v = np.concatenate(vals)[:, None] * np.ones((1, 4))
    rel = np.concatenate(rels)
    sid4 = np.repeat(sid[:, None], 4, axis=1)

    cells, inv_in = np.unique(flat[inside], return_inverse=True)
    nd = len(cells)
    inv = np.zeros(flat.shape, dtype=np.int64)
    inv[inside] = inv_in
    group = sid4 * nd + inv
    f = np.where(inside, 1.0 - v * w, 1.0)
    zero = f <= 0.0
    logs = np.log(np.where(zero, 1.0, f))
    g_in = group[inside]
    S = np.bincount(g_in, weights=logs[inside], minlength=nb * nd)
    Z = np.bincount(g_in, weights=zero[inside].astype(float), minlength=nb * nd)
    Q = (np.exp(S) * (Z == 0)).reshape(nb, nd)
    R = np.cumprod(Q, axis=0)
    B = 1.0 - R

    # comparison mask: first comparison step at which each cell has been observed
    mc = np.concatenate([seg.mask_cells[s] for s in steps]) if nb else np.zeros(0, np.int64)
    ms = np.concatenate([np.full(len(seg.mask_cells[s]), j) for j, s in enumerate(steps)])
    ucells, first_idx = np.unique(mc, return_index=True)
    first_seen = ms[first_idx]
    pos = np.searchsorted(ucells, cells)
    pos_c = np.minimum(pos, max(len(ucells) - 1, 0))
    found = (len(ucells) > 0) & (ucells[pos_c] == cells) if len(ucells) else np.zeros(nd, bool)
    fs_d = np.where(found, first_seen[pos_c] if len(ucells) else 0, nb)

    l0_u = _point_loss(loss_kind, F[ucells], np.zeros(len(ucells)))
    base = np.cumsum(np.bincount(first_seen, weights=l0_u, minlength=nb))
    Fd = F[cells]
    m = (fs_d[None, :] <= np.arange(nb)[:, None]).astype(float)
    lterm = _point_loss(loss_kind, Fd[None, :], B) - _point_loss(loss_kind, Fd[None, :], np.zeros((1, nd)))
    per_step = (base + (m * lterm).sum(axis=1)) / n_cells
    e = np.ones(nb) if supervision == "stepwise" else np.eye(nb)[-1]
    loss = float(e @ per_step)
    if not need_grad:
        return ConsistencyResult(loss, None, per_step, poses)
    if nd == 0:
        return ConsistencyResult(loss, LocalizerParams.zeros(), per_step, poses)

    G = e[:, None] * m * _point_dloss(loss_kind, Fd[None, :], B) / n_cells  # dL/dB
    Rbar = np.empty_like(R)
    Rbar[-1] = -G[-1]
    for j in range(nb - 2, -1, -1):
        Rbar[j] = -G[j] + Rbar[j + 1] * Q[j + 1]
    Rprev = np.vstack([np.ones((1, nd)), R[:-1]])
    Qbar = (Rbar * Rprev).ravel()

    Sg, Zg = S[group], Z[group]
    others = np.where(zero, np.where(Zg == 1, np.exp(Sg), 0.0), np.where(Zg == 0, np.exp(Sg - logs), 0.0))
    fbar = np.where(inside, Qbar[group] * others, 0.0)
    wbar = -v * fbar
    qbar = np.einsum("nk,nkj->nj", wbar, dw)
    tq = -qbar[:, 0] * rel[:, 1] + qbar[:, 1] * rel[:, 0]
    pose_bar = np.zeros((seg.n + 1, 3))
    pose_bar[seg.n_ref :, 0] = np.bincount(sid, weights=qbar[:, 0], minlength=nb)
    pose_bar[seg.n_ref :, 1] = np.bincount(sid, weights=qbar[:, 1], minlength=nb)
    pose_bar[seg.n_ref :, 2] = np.bincount(sid, weights=tq, minlength=nb)
    k = seg.n_ref - 1 if freeze_anchor else 0
    grad = integrate_backward(theta, poses[k:], corr[k:], seg.deltas[k:], seg.actions[k:], pose_bar[k:])
    return ConsistencyResult(loss, grad, per_step, poses)
