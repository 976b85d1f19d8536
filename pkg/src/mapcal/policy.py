"""Navigation policies: the forward-leg driver and a frontier explorer."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import Pose, compose_arr, relative_arr, transform_points
from .mapper import GlobalMap, LocalizerParams, bilinear
from .noise import (
    Action,
    ActuationNoiseParams,
    OdometryNoiseParams,
    RandomStream,
    fit_default_locobot_like,
    random_stream,
    read_odometry,
)
from .world import CONTROLS, EgoMap, Environment, SensorSpec, sense_with_cells, step_dynamics_ex

CORRIDOR_LENGTH = 0.30
CORRIDOR_HALF_WIDTH = 0.15
SIDE_RADIUS = 1.5


def forward_policy_step(ego: EgoMap, rng: RandomStream | None = None) -> Action:
    """Go forward while the corridor ahead is free, else turn toward the freer side."""
    pts = ego.occupied_points
    ahead = (pts[:, 0] > 0) & (pts[:, 0] <= CORRIDOR_LENGTH) & (np.abs(pts[:, 1]) <= CORRIDOR_HALF_WIDTH)
    if not ahead.any():
        return Action.FORWARD
    near = (np.hypot(pts[:, 0], pts[:, 1]) <= SIDE_RADIUS) & (pts[:, 0] > -0.2)
    left = np.count_nonzero(near & (pts[:, 1] > 0))
    right = np.count_nonzero(near & (pts[:, 1] < 0))
    return Action.TURN_LEFT if left <= right else Action.TURN_RIGHT


# --- frontier exploration ---------------------------------------------------------

FREE_BELOW = 0.3
OCC_ABOVE = 0.7
SEEN_ABOVE = 0.5
INFLATE_M = 0.15  # planning clearance around estimated obstacles
GOAL_RADIUS_M = 0.4  # a cell this close to a frontier counts as having reached it
LOOKAHEAD_M = 0.4
TURN_TOLERANCE = math.radians(15.0)
ESCAPE_M = 0.3  # how far the planner may look for a trusted start cell
REPLAN_EVERY = 40  # steps before a committed plan is refreshed anyway

_NBR8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass
class PolicyState:
    target: tuple[int, int] | None = None  # frontier-goal cell (row, col) in map indices
    path: list = field(default_factory=list)  # cells from the agent to the goal
    age: int = 0


GAP_CLOSE = 2  # closing iterations that fill the gaps between sensor rays


def classify(grid: np.ndarray, seen: np.ndarray):
    """Boolean (free, occupied, unknown) masks of a fused occupancy map.

    Unknown means unseen. Seen cells with ambiguous occupancy belong to none of
    the three: they are not traversable but do not attract exploration either,
    since looking at them again rarely settles them. The seen mask is closed
    morphologically first because the ray fan leaves isolated unsensed cells
    between neighbouring rays.
    """
    raw = seen >= SEEN_ABOVE
    # closing by a 3x3 square, GAP_CLOSE times, is one closing by the wider square
    size = 2 * GAP_CLOSE + 1
    known = ndimage.maximum_filter(raw.view(np.uint8), size=size, mode="constant", cval=0)
    known = ndimage.minimum_filter(known, size=size, mode="constant", cval=0).astype(bool)
    known |= raw
    free = known & (grid < FREE_BELOW)
    occ = known & (grid > OCC_ABOVE)
    return free, occ, ~known


def _shift_or(mask: np.ndarray) -> np.ndarray:
    """8-neighbourhood dilation (without the centre) by array shifts."""
    out = np.zeros_like(mask)
    h, w = mask.shape
    for dr, dc in _NBR8:
        out[max(dr, 0) : h + min(dr, 0), max(dc, 0) : w + min(dc, 0)] |= mask[
            max(-dr, 0) : h + min(-dr, 0), max(-dc, 0) : w + min(-dc, 0)
        ]
    return out


def frontier_mask(free: np.ndarray, unknown: np.ndarray) -> np.ndarray:
    return free & _shift_or(unknown)


def bfs_distances(passable: np.ndarray, start: tuple[int, int], stop: np.ndarray | None = None) -> np.ndarray:
    """8-connected hop distance from ``start`` over ``passable`` cells (-1 = unreached).

    Expansion halts after the first wave that touches ``stop``.
    """
    dist = np.full(passable.shape, -1, dtype=np.int64)
    dist[start] = 0
    front = np.zeros(passable.shape, dtype=bool)
    front[start] = True
    d = 0
    while True:
        if stop is not None and (front & stop).any():
            break
        new = _shift_or(front) & passable & (dist < 0)
        if not new.any():
            break
        d += 1
        dist[new] = d
        front = new
    return dist


def _backtrack(dist: np.ndarray, goal: tuple[int, int]) -> list:
    path = [goal]
    r, c = goal
    h, w = dist.shape
    while dist[r, c] > 0:
        for dr, dc in _NBR8:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and dist[rr, cc] == dist[r, c] - 1:
                r, c = rr, cc
                break
        path.append((r, c))
    return path[::-1]


def plan_to_frontier(grid: np.ndarray, seen: np.ndarray, start: tuple[int, int], resolution: float, classes=None):
    """Shortest 8-connected path from ``start`` to the nearest frontier goal, or None.

    Returns (goal cell, path). Goals are cells near a frontier but more than
    the goal radius (in hops) away; ties in hop distance go to the goal closest
    in straight-line distance, then to the lowest row-major index. Obstacles are inflated for clearance; if that leaves no
    reachable goal the plan is retried without inflation.
    """
    free, occ, unknown = classify(grid, seen) if classes is None else classes
    frontier = frontier_mask(free, unknown)
    if not frontier.any():
        return None
    rad = max(1, int(round(GOAL_RADIUS_M / resolution)))
    goal_zone = _within_taxicab(frontier, rad)
    # goals already within reach of the sensor from here cannot pull the agent anywhere
    rr, cc = np.ogrid[: grid.shape[0], : grid.shape[1]]
    goal_zone &= np.maximum(np.abs(rr - start[0]), np.abs(cc - start[1])) > rad
    for inflate in (INFLATE_M, 0.0):
        blocked = occ
        if inflate > 0:
            n_inf = int(round(inflate / resolution))
            blocked = _within_taxicab(occ, n_inf)
            # the agent may start inside the clearance band and must be able to leave it
            blocked &= ~(((rr - start[0]) ** 2 + (cc - start[1]) ** 2 <= (n_inf + 1) ** 2) & ~occ)
        passable = free & ~blocked
        origin = _relocate(passable, start, int(round(ESCAPE_M / resolution)))
        passable[origin] = True
        goals = goal_zone & passable
        dist = bfs_distances(passable, origin, stop=goals)
        reached = goals & (dist >= 0)
        if reached.any():
            dmin = dist[reached].min()
            cr, cc_ = np.nonzero(reached & (dist == dmin))
            # hop-distance ties go to the straightest goal, then the lowest row-major index
            i = int(np.argmin((cr - origin[0]) ** 2 + (cc_ - origin[1]) ** 2))
            goal = (int(cr[i]), int(cc_[i]))
            path = _backtrack(dist, goal)
            return goal, path if origin == start else [start] + path
    return None


def _within_taxicab(mask: np.ndarray, radius: int) -> np.ndarray:
    """Cells at most ``radius`` 4-connected steps from ``mask`` (binary dilation by a diamond)."""
    if not mask.any():
        return mask.copy()
    return ndimage.distance_transform_cdt(~mask, metric="taxicab") <= radius


def _relocate(passable: np.ndarray, start: tuple[int, int], radius: int) -> tuple[int, int]:
    """Nearest traversable cell within ``radius`` cells of ``start`` (``start`` itself if none).

    Pose error smears walls over the cell the agent actually stands on; the
    agent then plans from the closest cell it can still trust.
    """
    if passable[start]:
        return start
    r0, c0 = start
    h, w = passable.shape
    rs, cs = slice(max(r0 - radius, 0), min(r0 + radius + 1, h)), slice(max(c0 - radius, 0), min(c0 + radius + 1, w))
    r, c = np.nonzero(passable[rs, cs])
    if r.size == 0:
        return start
    r, c = r + rs.start, c + cs.start
    d2 = (r - r0) ** 2 + (c - c0) ** 2
    ok = d2 <= radius * radius
    if not ok.any():
        return start
    i = np.flatnonzero(ok)[np.argmin(d2[ok])]  # nonzero() is row-major, so ties go to the lowest index
    return int(r[i]), int(c[i])


def _ahead_blocked(occ: np.ndarray, origin, resolution: float, pose) -> bool:
    s = np.linspace(resolution, CORRIDOR_LENGTH, int(round(CORRIDOR_LENGTH / resolution)))
    off = np.array([-resolution / 2, 0.0, resolution / 2])  # the agent is a point
    ss, oo = np.meshgrid(s, off)
    x = pose.x + ss * math.cos(pose.phi) - oo * math.sin(pose.phi)
    y = pose.y + ss * math.sin(pose.phi) + oo * math.cos(pose.phi)
    r = np.rint((y - origin.y) / resolution).astype(np.int64)
    c = np.rint((x - origin.x) / resolution).astype(np.int64)
    h, w = occ.shape
    ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
    return bool(occ[r[ok], c[ok]].any())


def frontier_explore_step(gmap, est_pose, state: PolicyState | None = None):
    """Next action toward the nearest frontier of ``gmap`` from ``est_pose``."""
    state = PolicyState() if state is None else state
    res = gmap.resolution
    r0, c0 = (int(v) for v in gmap.cell_of(est_pose.x, est_pose.y))
    h, w = gmap.shape
    if not (0 <= r0 < h and 0 <= c0 < w):
        return Action.TURN_LEFT, PolicyState()
    start = (r0, c0)

    # keep following the current plan unless it went stale
    free, occ, unknown = classify(gmap.grid, gmap.seen)
    path = _rejoin(state.path, start)
    stale = (
        path is None
        or state.age >= REPLAN_EVERY
        or state.target is None
        or not _near_frontier(free, unknown, state.target, res)
        or any(occ[p] for p in path)
    )
    if stale:
        plan = plan_to_frontier(gmap.grid, gmap.seen, start, res, (free, occ, unknown))
        if plan is None:
            return Action.TURN_LEFT, PolicyState()
        state = PolicyState(plan[0], plan[1], 0)
        path = plan[1]
    else:
        state = PolicyState(state.target, path, state.age + 1)

    k = min(len(path) - 1, max(1, int(round(LOOKAHEAD_M / res))))
    if k == 0:  # standing on the goal: look around
        return Action.TURN_LEFT, PolicyState()
    wr, wc = path[k]
    wx = gmap.origin.x + wc * res
    wy = gmap.origin.y + wr * res
    bearing = math.atan2(wy - est_pose.y, wx - est_pose.x) - est_pose.phi
    bearing = math.atan2(math.sin(bearing), math.cos(bearing))
    if bearing > TURN_TOLERANCE:
        return Action.TURN_LEFT, state
    if bearing < -TURN_TOLERANCE:
        return Action.TURN_RIGHT, state
    if free[start] and _ahead_blocked(occ, gmap.origin, res, est_pose):
        return (Action.TURN_LEFT if bearing >= 0 else Action.TURN_RIGHT), PolicyState()
    return Action.FORWARD, state


def _rejoin(path, start, tol: int = 2):
    """Suffix of ``path`` from the cell nearest to ``start`` (None if all are farther than ``tol``)."""
    if not path:
        return None
    arr = np.asarray(path)
    d = np.abs(arr - np.asarray(start)).max(axis=1)
    i = int(np.argmin(d[::-1]))
    i = len(path) - 1 - i  # latest of the nearest cells
    if d[i] > tol:
        return None
    return [start] + [tuple(p) for p in path[i + 1 :]]


def _near_frontier(free, unknown, cell, resolution) -> bool:
    rad = max(1, int(round(GOAL_RADIUS_M / resolution)))
    r, c = cell
    sl = (slice(max(r - rad - 1, 0), r + rad + 2), slice(max(c - rad - 1, 0), c + rad + 2))
    return bool(frontier_mask(free[sl], unknown[sl]).any())


# --- closed-loop episodes -----------------------------------------------------------

@dataclass
class EpisodeResult:
    coverage_ratio: float  # percent of the environment's free area sensed from gt poses
    coverage_area: float  # m^2
    coverage_trace: np.ndarray  # ratio after every step
    final_map: GlobalMap
    gt_poses: np.ndarray
    est_poses: np.ndarray
    actions: np.ndarray


def _fuse_local(grid: np.ndarray, seen: np.ndarray, flat, occ_w, seen_w) -> None:
    """In-place noisy-or fusion of bilinear deposits on the touched cells only."""
    cells, inv = np.unique(flat, return_inverse=True)
    g, s = grid.reshape(-1), seen.reshape(-1)
    for arr, vals in ((g, occ_w), (s, seen_w)):
        keep = np.ones(len(cells))
        np.multiply.at(keep, inv, 1.0 - vals)
        arr[cells] = 1.0 - (1.0 - arr[cells]) * keep


def _crop_box(seen: np.ndarray, pad: int):
    rows = np.flatnonzero(seen.any(axis=1))
    cols = np.flatnonzero(seen.any(axis=0))
    h, w = seen.shape
    return (
        slice(max(rows[0] - pad, 0), min(rows[-1] + pad + 1, h)),
        slice(max(cols[0] - pad, 0), min(cols[-1] + pad + 1, w)),
    )


class _CroppedMap:
    """View of the known part of a global map, enough for the planner."""

    def __init__(self, grid, seen, origin, resolution, box):
        self.grid, self.seen = grid[box], seen[box]
        self.resolution = resolution
        self.origin = Pose(origin.x + box[1].start * resolution, origin.y + box[0].start * resolution, 0.0)
        self.shape = self.grid.shape

    def cell_of(self, x, y):
        return (
            np.rint((np.asarray(y) - self.origin.y) / self.resolution).astype(np.int64),
            np.rint((np.asarray(x) - self.origin.x) / self.resolution).astype(np.int64),
        )


def run_episode(
    env: Environment,
    theta: LocalizerParams,
    policy: str = "frontier",
    n_steps: int = 1000,
    noise: tuple[ActuationNoiseParams, OdometryNoiseParams] | None = None,
    rng: RandomStream | None = None,
    sensor: SensorSpec = SensorSpec(),
    start: Pose | None = None,
) -> EpisodeResult:
    """Closed-loop exploration: sense, localize with ``theta``, fuse, plan, move."""
    if policy != "frontier":
        raise ValueError(f"unknown policy {policy!r}")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    rng = random_stream(0) if rng is None else rng
    act_noise, odo_noise = noise if noise is not None else fit_default_locobot_like("clean")
    gt = start if start is not None else env.sample_free_pose(rng)
    cmd = gt.as_array()
    odom_prev = cmd.copy()
    est = cmd.copy()
    gmap = GlobalMap.empty(est[:2], resolution=env.resolution)
    grid, seen = gmap.grid, gmap.seen
    free_cells = ~env.grid.ravel()
    covered = np.zeros(env.grid.size, dtype=bool)
    n_free = int(free_cells.sum())
    trace, gts, ests, acts = [], [gt.as_array()], [est.copy()], []
    state = PolicyState()
    pad = int(round(2 * GOAL_RADIUS_M / env.resolution)) + 2
    for _ in range(n_steps):
        ego, cells = sense_with_cells(env, gt, sensor)
        covered[cells] = True
        trace.append(100.0 * np.count_nonzero(covered & free_cells) / n_free)
        pts = transform_points(est, ego.points)
        flat, wts, inside = bilinear(pts, gmap.origin, gmap.resolution, gmap.shape)
        _fuse_local(grid, seen, flat[inside], (ego.occ[:, None] * wts)[inside], wts[inside])

        view = _CroppedMap(grid, seen, gmap.origin, gmap.resolution, _crop_box(seen >= SEEN_ABOVE, pad))
        if state.path:  # plans are kept in global indices; shift into the view
            state = _shift_state(state, gmap, view, +1)
        action, state = frontier_explore_step(view, Pose.from_array(est), state)
        state = _shift_state(state, gmap, view, -1)

        gt, frac = step_dynamics_ex(env, gt, action, act_noise, rng)
        u = CONTROLS[action].as_array()
        u[:2] *= frac
        cmd = compose_arr(cmd, u)
        odom = read_odometry(Pose.from_array(cmd), odo_noise, rng).as_array()
        delta = relative_arr(odom_prev, odom)
        est = compose_arr(est, theta.correct(delta, int(action)))
        odom_prev = odom
        acts.append(int(action))
        gts.append(gt.as_array())
        ests.append(est.copy())
    ratio = trace[-1]
    return EpisodeResult(
        ratio,
        np.count_nonzero(covered & free_cells) * env.resolution**2,
        np.array(trace),
        gmap.like(grid.copy(), seen.copy()),
        np.array(gts),
        np.array(ests),
        np.array(acts, dtype=np.int64),
    )


def _shift_state(state: PolicyState, gmap, view, sign: int) -> PolicyState:
    dr = int(round((view.origin.y - gmap.origin.y) / gmap.resolution))
    dc = int(round((view.origin.x - gmap.origin.x) / gmap.resolution))
    dr, dc = -sign * dr, -sign * dc
    move = lambda p: (p[0] + dr, p[1] + dc)  # noqa: E731
    return PolicyState(
        None if state.target is None else move(state.target), [move(p) for p in state.path], state.age
    )
