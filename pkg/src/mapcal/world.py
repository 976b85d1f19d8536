"""Procedural indoor worlds, collision dynamics and the raycast range sensor."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import Pose, PoseDelta, compose, to_body
from .noise import DEG, Action, ActuationNoiseParams, RandomStream, sample_actuation_noise

FORWARD_STEP = 0.25
TURN_STEP = 10.0 * DEG

CONTROLS = {
    Action.FORWARD: PoseDelta(FORWARD_STEP, 0.0, 0.0),
    Action.TURN_LEFT: PoseDelta(0.0, 0.0, TURN_STEP),
    Action.TURN_RIGHT: PoseDelta(0.0, 0.0, -TURN_STEP),
}


@dataclass(frozen=True)
class EnvSpec:
    width_m: float = 8.0
    height_m: float = 8.0
    n_rooms: int = 4
    resolution: float = 0.05
    n_obstacles: int = 0

    def validate(self):
        if self.width_m < 4 or self.height_m < 4:
            raise ValueError("invalid-spec: width and height must be >= 4 m")
        if not 0.02 <= self.resolution <= 0.25:
            raise ValueError("invalid-spec: resolution must lie in [0.02, 0.25] m")
        if self.n_rooms < 1 or self.n_obstacles < 0:
            raise ValueError("invalid-spec: n_rooms >= 1 and n_obstacles >= 0 required")


@dataclass(frozen=True)
class SensorSpec:
    n_rays: int = 72
    fov: float = 2.0 * math.pi
    max_range: float = 1.55
    patch_side: int = 65

    def __post_init__(self):
        if self.n_rays < 3 or not 0 < self.fov <= 2 * math.pi or self.max_range <= 0:
            raise ValueError("invalid SensorSpec")
        if self.patch_side % 2 == 0:
            raise ValueError("patch_side must be odd")

    def ray_offsets(self) -> np.ndarray:
        if self.fov >= 2 * math.pi - 1e-12:
            # symmetric under a half turn when n_rays is even
            return -math.pi + 2 * math.pi * (np.arange(self.n_rays) + 0.5) / self.n_rays
        return np.linspace(-self.fov / 2, self.fov / 2, self.n_rays)


@dataclass(eq=False)
class Environment:
    grid: np.ndarray  # bool, [row=y, col=x], True = wall
    resolution: float
    seed: int = 0
    origin: Pose = field(default_factory=Pose)

    def __post_init__(self):
        self.grid = np.ascontiguousarray(self.grid, dtype=bool)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @cached_property
    def free_area(self) -> float:
        return float(self.resolution**2 * np.count_nonzero(~self.grid))

    def cell_of(self, x, y):
        """Row/col index of the cell containing a world point (cell centres sit on the lattice)."""
        r = np.rint((np.asarray(y) - self.origin.y) / self.resolution).astype(np.int64)
        c = np.rint((np.asarray(x) - self.origin.x) / self.resolution).astype(np.int64)
        return r, c

    def cell_center(self, r, c):
        return (self.origin.x + np.asarray(c) * self.resolution, self.origin.y + np.asarray(r) * self.resolution)

    def is_wall(self, x, y):
        r, c = self.cell_of(x, y)
        h, w = self.grid.shape
        inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        out = np.ones(np.shape(r), dtype=bool)
        out[inside] = self.grid[r[inside], c[inside]]
        return out

    def is_free_pose(self, pose: Pose) -> bool:
        return not bool(self.is_wall(pose.x, pose.y))

    @cached_property
    def clearance(self) -> np.ndarray:
        """Distance (m) from every cell centre to the nearest wall cell."""
        return ndimage.distance_transform_edt(~self.grid) * self.resolution

    def sample_free_pose(self, rng: RandomStream, min_clearance: float = 0.35, attempts: int = 1000) -> Pose:
        h, w = self.grid.shape
        for _ in range(attempts):
            r, c = int(rng.integers(0, h)), int(rng.integers(0, w))
            heading = float(rng.uniform(-math.pi, math.pi))
            if self.clearance[r, c] >= min_clearance:
                x, y = self.cell_center(r, c)
                return Pose(float(x), float(y), heading)
        raise RuntimeError("degenerate environment: no free start pose found in 1000 attempts")

    def is_connected(self) -> bool:
        labels, n = ndimage.label(~self.grid)
        return n == 1

    # --- persistence: one JSON header line, then '#'/'.' rows (row 0 first)
    def dumps(self) -> str:
        h, w = self.grid.shape
        header = json.dumps(
            {"resolution": self.resolution, "width": w, "height": h, "seed": self.seed}, sort_keys=True
        )
        rows = ["".join("#" if v else "." for v in row) for row in self.grid]
        return header + "\n" + "\n".join(rows) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Environment":
        lines = text.splitlines()
        header = json.loads(lines[0])
        rows = lines[1 : 1 + header["height"]]
        grid = np.array([[ch == "#" for ch in row] for row in rows], dtype=bool)
        if grid.shape != (header["height"], header["width"]):
            raise ValueError("environment file: grid shape does not match header")
        return cls(grid, float(header["resolution"]), int(header["seed"]))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "Environment":
        return cls.loads(Path(path).read_text())


# --- generation -------------------------------------------------------------

def _split_rooms(rng, rooms, n_rooms, min_room):
    """Binary space partition; each split returns (wall line, door span)."""
    splits = []
    while len(rooms) < n_rooms:
        order = sorted(range(len(rooms)), key=lambda i: -(rooms[i][2] - rooms[i][0]) * (rooms[i][3] - rooms[i][1]))
        for i in order:
            x0, y0, x1, y1 = rooms[i]
            w, h = x1 - x0, y1 - y0
            vertical = w >= h
            span = w if vertical else h
            if span < 2 * min_room:
                continue
            lo, hi = (x0 if vertical else y0) + min_room, (x1 if vertical else y1) - min_room
            at = int(rng.integers(lo, hi + 1))
            if vertical:
                rooms[i : i + 1] = [(x0, y0, at, y1), (at, y0, x1, y1)]
            else:
                rooms[i : i + 1] = [(x0, y0, x1, at), (x0, at, x1, y1)]
            splits.append((vertical, at, (y0, y1) if vertical else (x0, x1)))
            break
        else:
            raise ValueError(f"invalid-spec: cannot fit {n_rooms} rooms")
    return splits


def generate_environment(seed: int, spec: EnvSpec = EnvSpec()) -> Environment:
    """Deterministic closed world of ``n_rooms`` rooms joined by doors."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x9E37]))
    res = spec.resolution
    w, h = int(round(spec.width_m / res)), int(round(spec.height_m / res))
    t = max(1, int(round(0.1 / res)))  # wall thickness in cells
    door = max(2, int(round(0.9 / res)))
    min_room = int(math.ceil(1.8 / res)) + t
    grid = np.zeros((h, w), dtype=bool)
    grid[:t, :] = grid[-t:, :] = True
    grid[:, :t] = grid[:, -t:] = True

    splits = _split_rooms(rng, [(0, 0, w, h)], spec.n_rooms, min_room)
    for vertical, at, (a, b) in splits:
        lo = a + t
        hi = b - t - door
        d0 = int(rng.integers(lo, hi + 1))
        c0 = at - t // 2
        if vertical:
            grid[a:b, c0 : c0 + t] = True
            grid[d0 : d0 + door, c0 : c0 + t] = False
        else:
            grid[c0 : c0 + t, a:b] = True
            grid[c0 : c0 + t, d0 : d0 + door] = False

    placed = 0
    tries = 0
    while placed < spec.n_obstacles:
        tries += 1
        if tries > 200 * max(1, spec.n_obstacles):
            raise ValueError("invalid-spec: could not place obstacles without disconnecting free space")
        ow, oh = (int(rng.integers(int(0.3 / res), int(0.8 / res) + 1)) for _ in range(2))
        r0, c0 = int(rng.integers(t + 1, h - t - oh - 1)), int(rng.integers(t + 1, w - t - ow - 1))
        trial = grid.copy()
        trial[r0 : r0 + oh, c0 : c0 + ow] = True
        if ndimage.label(~trial)[1] == 1:
            grid = trial
            placed += 1

    env = Environment(grid, res, int(seed))
    if not env.is_connected():  # pragma: no cover - splits always keep a door
        raise RuntimeError("generated environment is disconnected")
    return env


# --- sensing ----------------------------------------------------------------

@dataclass(eq=False)
class EgoMap:
    """Egocentric observation in the agent's body frame (agent at the origin, facing +x).

    ``points`` are body-frame coordinates of every observed cell and ``occ`` their
    occupancy in [0, 1]. The square ``grid``/``seen`` rasters are derived views.
    """

    points: np.ndarray
    occ: np.ndarray
    resolution: float
    side: int = 65

    @classmethod
    def from_grid(cls, grid: np.ndarray, seen: np.ndarray | None = None, resolution: float = 0.05) -> "EgoMap":
        grid = np.asarray(grid, dtype=float)
        side = grid.shape[0]
        seen = (grid > 0) if seen is None else np.asarray(seen) > 0
        half = side // 2
        r, c = np.nonzero(seen | (grid > 0))
        pts = np.stack([(c - half) * resolution, (r - half) * resolution], axis=1).astype(float)
        return cls(pts, grid[r, c].copy(), resolution, side)

    @property
    def occupied_points(self) -> np.ndarray:
        return self.points[self.occ > 0]

    def _raster_index(self):
        half = self.side // 2
        c = np.rint(self.points[:, 0] / self.resolution).astype(np.int64) + half
        r = np.rint(self.points[:, 1] / self.resolution).astype(np.int64) + half
        return r, c

    @property
    def grid(self) -> np.ndarray:
        """Occupancy raster, rows = body y, cols = body x; centre cell is the agent."""
        out = np.zeros((self.side, self.side))
        r, c = self._raster_index()
        np.maximum.at(out, (r, c), self.occ)
        return out

    @property
    def seen(self) -> np.ndarray:
        out = np.zeros((self.side, self.side))
        r, c = self._raster_index()
        out[r, c] = 1.0
        return out


def _raycast_cells(env: Environment, pose: Pose, spec: SensorSpec):
    """Flat indices of free cells traversed and wall cells hit by the ray fan."""
    res = env.resolution
    step = res / 4.0
    n_s = int(math.ceil(spec.max_range / step))
    ang = pose.phi + spec.ray_offsets()
    dist = (np.arange(n_s + 1) * step)[None, :]
    xs = pose.x + np.cos(ang)[:, None] * dist
    ys = pose.y + np.sin(ang)[:, None] * dist
    r, c = env.cell_of(xs, ys)
    h, w = env.grid.shape
    np.clip(r, 0, h - 1, out=r)
    np.clip(c, 0, w - 1, out=c)
    wall = env.grid[r, c]
    hit_any = wall.any(axis=1)
    first = np.where(hit_any, wall.argmax(axis=1), n_s + 1)
    flat = r * w + c
    before = np.arange(n_s + 1)[None, :] < first[:, None]
    free = np.unique(flat[before])
    hits = np.unique(flat[hit_any, first[hit_any]])
    return free, hits


def sense_egomap(env: Environment, pose: Pose, spec: SensorSpec = SensorSpec()) -> EgoMap:
    return sense_with_cells(env, pose, spec)[0]


def sense_with_cells(env: Environment, pose: Pose, spec: SensorSpec = SensorSpec()):
    """Egocentric map plus the flat world indices of the free and wall cells it saw."""
    if not env.is_free_pose(pose):
        raise ValueError("invalid-pose: sensing pose lies inside a wall")
    free, hits = _raycast_cells(env, pose, spec)
    w = env.grid.shape[1]
    flat = np.concatenate([free, hits])
    occ = np.concatenate([np.zeros(len(free)), np.ones(len(hits))])
    x, y = env.cell_center(flat // w, flat % w)
    pts = to_body(pose.as_array(), np.stack([x, y], axis=1))
    lim = (spec.patch_side // 2 + 0.5) * env.resolution
    keep = (np.abs(pts[:, 0]) < lim) & (np.abs(pts[:, 1]) < lim)
    return EgoMap(pts[keep], occ[keep], env.resolution, spec.patch_side), flat[keep]


# --- dynamics ---------------------------------------------------------------

def _truncate(env: Environment, start: Pose, end_xy: np.ndarray) -> tuple[np.ndarray, float]:
    """Last collision-free point on the segment start->end and the travelled fraction."""
    s = np.array([start.x, start.y])
    seg = end_xy - s
    length = float(np.hypot(*seg))
    if length == 0.0:
        return s, 1.0
    n = max(2, int(math.ceil(length / (env.resolution / 10.0))))
    f = np.linspace(0.0, 1.0, n + 1)
    pts = s[None, :] + f[:, None] * seg[None, :]
    wall = env.is_wall(pts[:, 0], pts[:, 1])
    if not wall.any():
        return end_xy, 1.0
    k = int(wall.argmax())
    if k == 0:  # pragma: no cover - start is always free
        return s, 0.0
    return pts[k - 1], float(f[k - 1])


def step_dynamics_ex(
    env: Environment, pose: Pose, action: Action, noise: ActuationNoiseParams, rng: RandomStream
) -> tuple[Pose, float]:
    """Noisy motion with truncation at walls; also returns the travelled fraction."""
    eps = sample_actuation_noise(noise, action, rng)
    target = compose(pose, CONTROLS[Action(action)] + eps)
    xy, frac = _truncate(env, pose, np.array([target.x, target.y]))
    return Pose(xy[0], xy[1], target.phi), frac


def step_dynamics(
    env: Environment, pose: Pose, action: Action, noise: ActuationNoiseParams, rng: RandomStream
) -> Pose:
    return step_dynamics_ex(env, pose, action, noise, rng)[0]
