"""Independent reference computations shared by the unit and acceptance tests."""
import numpy as np

from mapcal.geometry import transform_points
from mapcal.mapper import LocalizerParams, grad_consistency, integrate

STEPS = (1e-7, 1e-8, 1e-9)


def random_theta(rng, scale=0.02):
    th = LocalizerParams.identity()
    return LocalizerParams(th.A + scale * rng.standard_normal(th.A.shape), scale * 0.2 * rng.standard_normal(th.b.shape))


def cell_signature(theta, seg):
    """Lattice cell of every comparison deposit; the loss is smooth while this is unchanged."""
    poses, _ = integrate(theta, seg.anchor, seg.deltas, seg.actions, seg.closure)
    fr = seg.frame
    out = []
    for step in range(seg.n_ref, seg.n + 1):
        pts = transform_points(poses[step], seg.occ_points[step])
        out.append(np.floor((pts[:, 0] - fr.origin.x) / fr.resolution))
        out.append(np.floor((pts[:, 1] - fr.origin.y) / fr.resolution))
    return np.concatenate(out)


def fd_gradient(theta, seg, kind, supervision, ref, steps=STEPS):
    """Central differences of the loss with the reference frozen.

    The loss is piecewise smooth (bilinear weights kink where a deposit
    changes cell). Per component, steps whose stencil leaves the piece
    containing ``theta`` are discarded; of the rest, the adjacent pair of
    estimates that agree best is located and its larger-step member returned
    (truncation error is negligible there, round-off smallest).
    """
    base = cell_signature(theta, seg)

    def loss(v):
        return grad_consistency(LocalizerParams.from_flat(v), seg, kind, supervision, ref, need_grad=False).loss

    num = np.empty(36)
    for i in range(36):
        est = []
        for h in steps:
            up, dn = theta.flat(), theta.flat()
            up[i] += h
            dn[i] -= h
            smooth = all(np.array_equal(cell_signature(LocalizerParams.from_flat(v), seg), base) for v in (up, dn))
            if smooth or h == steps[-1]:
                est.append((loss(up) - loss(dn)) / (2 * h))
        if len(est) == 1:
            num[i] = est[0]
            continue
        gaps = [abs(a - b) for a, b in zip(est, est[1:])]
        num[i] = est[int(np.argmin(gaps))]
    return num


def fd_agrees(analytic, numeric, rel=1e-3, abs_floor=1e-8, small=1e-6) -> tuple[bool, float]:
    """Relative error test with an absolute floor for near-zero components; returns (ok, worst rel)."""
    analytic, numeric = np.asarray(analytic).ravel(), np.asarray(numeric).ravel()
    mag = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    big = mag >= small
    ok = bool(np.all(err[big] <= rel * mag[big]) and np.all(err[~big] <= abs_floor))
    worst = float(np.max(err[big] / mag[big])) if big.any() else 0.0
    return ok, worst
