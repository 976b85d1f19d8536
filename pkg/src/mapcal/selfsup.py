"""Round-trip data, the map-consistency objective and the adaptation arms."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import mapper
from .geometry import Pose, compose_arr, relative_arr, wrap_angle
from .mapper import GlobalMap, LocalizerParams, Segment
from .noise import (
    Action,
    ActuationNoiseParams,
    OdometryNoiseParams,
    RandomStream,
    random_stream,
    read_odometry,
    sample_dr_noise,
)
from .parallel import cached_environment, pmap
from .policy import forward_policy_step
from .world import CONTROLS, EgoMap, EnvSpec, Environment, SensorSpec, sense_egomap, step_dynamics_ex

log = logging.getLogger(__name__)

TURN_LEN = 18
DR_STREAM = 3  # random-stream key of the domain-randomisation data
SWAP = {Action.FORWARD: Action.FORWARD, Action.TURN_LEFT: Action.TURN_RIGHT, Action.TURN_RIGHT: Action.TURN_LEFT}


def make_round_trip_actions(forward: Sequence[Action], turn_len: int = TURN_LEN) -> list[Action]:
    forward = [Action(a) for a in forward]
    if not forward:
        raise ValueError("forward action sequence must be non-empty")
    return forward + [Action.TURN_LEFT] * turn_len + [SWAP[a] for a in reversed(forward)]


# --- trajectories -------------------------------------------------------------

@dataclass(eq=False)
class Trajectory:
    """Round trip with poses ``0..T``; ``actions[t-1]`` moves pose ``t-1`` to ``t``."""

    actions: np.ndarray
    odom: np.ndarray  # (T+1, 3) absolute odometry readings
    gt: np.ndarray  # (T+1, 3) ground truth, evaluation only
    t_r: int
    turn_len: int = TURN_LEN
    env_seed: int = 0
    env_spec: dict = field(default_factory=dict)
    noise_preset: str = ""
    k: float = 0.0
    rng_seed: int = 0
    traj_id: str = ""
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def T(self) -> int:
        return len(self.actions)

    def header(self) -> dict:
        return {
            "env_seed": self.env_seed,
            "env_spec": self.env_spec,
            "noise_preset": self.noise_preset,
            "k": self.k,
            "t_r": self.t_r,
            "turn_len": self.turn_len,
            "T": self.T,
            "rng_seed": self.rng_seed,
        }

    def dumps(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        for t in range(self.T + 1):
            act = None if t == 0 else Action(int(self.actions[t - 1])).name
            lines.append(
                json.dumps({"t": t, "action": act, "odom": [float(v) for v in self.odom[t]], "gt": [float(v) for v in self.gt[t]]})
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, traj_id: str = "") -> "Trajectory":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        h = json.loads(lines[0])
        steps = [json.loads(ln) for ln in lines[1:]]
        if len(steps) != h["T"] + 1:
            raise ValueError("trajectory file: step count does not match header T")
        acts = np.array([int(Action[s["action"]]) for s in steps[1:]], dtype=np.int64)
        return cls(
            acts,
            np.array([s["odom"] for s in steps], dtype=float),
            np.array([s["gt"] for s in steps], dtype=float),
            int(h["t_r"]),
            int(h["turn_len"]),
            int(h["env_seed"]),
            h.get("env_spec", {}),
            h.get("noise_preset", ""),
            float(h["k"]),
            int(h["rng_seed"]),
            traj_id,
        )

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "Trajectory":
        return cls.loads(Path(path).read_text(), traj_id=Path(path).stem)

    # observations are regenerated from the environment and ground-truth poses
    def observations(self, env: Environment, sensor: SensorSpec = SensorSpec()) -> list[EgoMap]:
        return [sense_egomap(env, Pose.from_array(p), sensor) for p in self.gt]

    def frame(self, resolution: float = mapper.MAP_RESOLUTION) -> GlobalMap:
        return GlobalMap.empty(self.odom[0, :2], mapper.MAP_EXTENT, resolution)

    def step_data(self, env: Environment, sensor: SensorSpec = SensorSpec()):
        """Per-step occupied points/values and comparison-mask cells (cached).

        Mask cells are the frame cells each observation covers when placed at
        the raw odometry pose; only steps after the turn can be compared, so
        earlier entries are None.
        """
        key = ("steps", sensor, env.seed, env.resolution)
        if key not in self._cache:
            fr = self.frame(env.resolution)
            h, w = fr.shape
            lo = self.t_r + self.turn_len
            pts, vals, masks = [], [], []
            for t, (g, p) in enumerate(zip(self.gt, self.odom)):
                ego = sense_egomap(env, Pose.from_array(g), sensor)
                sel = ego.occ > 0
                pts.append(ego.points[sel])
                vals.append(ego.occ[sel])
                if t <= lo:
                    masks.append(None)
                    continue
                c, sn = math.cos(p[2]), math.sin(p[2])
                x = p[0] + c * ego.points[:, 0] - sn * ego.points[:, 1]
                y = p[1] + sn * ego.points[:, 0] + c * ego.points[:, 1]
                r, cc = fr.cell_of(x, y)
                ok = (r >= 0) & (r < h) & (cc >= 0) & (cc < w)
                masks.append(np.unique(r[ok] * w + cc[ok]).astype(np.int32))
            self._cache[key] = (pts, vals, masks)
        return self._cache[key]


def collect_trajectory(
    env: Environment,
    forward_policy: Callable,
    n_forward_steps: int,
    act_noise: ActuationNoiseParams,
    odo_noise: OdometryNoiseParams,
    rng: RandomStream,
    sensor: SensorSpec = SensorSpec(),
    start: Pose | None = None,
) -> Trajectory:
    """Drive a round trip and record actions, odometry readings and ground truth.

    The odometer dead-reckons the commanded controls (scaled by the fraction of
    the motion that was not blocked by a wall); the reading is that pose plus
    ``k`` times a mixture draw. Actuation noise is therefore invisible to it.
    """
    if n_forward_steps < 1:
        raise ValueError("n_forward_steps must be >= 1")
    gt = start if start is not None else env.sample_free_pose(rng)
    cmd = gt.as_array()
    gts, odoms, acts = [gt.as_array()], [gt.as_array()], []

    def execute(a):
        nonlocal gt, cmd
        gt, frac = step_dynamics_ex(env, gt, a, act_noise, rng)
        u = CONTROLS[a].as_array()
        u[:2] *= frac
        cmd = compose_arr(cmd, u)
        reading = read_odometry(Pose.from_array(cmd), odo_noise, rng)
        acts.append(int(a))
        gts.append(gt.as_array())
        odoms.append(reading.as_array())

    forward = []
    for _ in range(n_forward_steps):
        a = Action(forward_policy(sense_egomap(env, gt, sensor), rng))
        forward.append(a)
        execute(a)
    for a in make_round_trip_actions(forward)[n_forward_steps:]:
        execute(a)
    traj = Trajectory(
        np.array(acts, dtype=np.int64), np.array(odoms), np.array(gts), n_forward_steps, TURN_LEN,
        env_seed=env.seed, k=odo_noise.k,
    )
    return traj


# --- crops and the consistency loss --------------------------------------------

@dataclass(frozen=True)
class CropTriple:
    t1: int
    to: int
    t2: int

    @staticmethod
    def full(traj: Trajectory) -> "CropTriple":
        return CropTriple(0, traj.t_r + traj.turn_len, traj.T)

    def validate(self, traj: Trajectory) -> None:
        mirror = 2 * traj.t_r + traj.turn_len - self.t2
        if not (0 <= self.t1 < self.to < self.t2 <= traj.T):
            raise ValueError(f"invalid crop {self}: need t1 < to < t2 <= T")
        if self.to < traj.t_r + traj.turn_len:
            raise ValueError(f"invalid crop {self}: to must not precede the end of the turn")
        if self.t1 > mirror:
            raise ValueError(f"invalid crop {self}: t1 must not exceed mirror(t2)")


def sample_crops(traj: Trajectory, n: int, rng: RandomStream) -> list[CropTriple]:
    """``n`` crops drawn uniformly from all valid triples (by rejection)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    lo = traj.t_r + traj.turn_len
    if lo + 1 > traj.T:
        raise ValueError("trajectory too short to admit any crop")
    out = []
    while len(out) < n:
        to, t2 = sorted(int(v) for v in rng.integers(lo, traj.T + 1, size=2))
        t1 = int(rng.integers(0, lo))
        if to == t2:
            continue
        c = CropTriple(t1, to, t2)
        if t1 <= 2 * traj.t_r + traj.turn_len - t2:
            out.append(c)
    return out


def make_segment(traj: Trajectory, env: Environment, crop: CropTriple, sensor: SensorSpec = SensorSpec()) -> Segment:
    crop.validate(traj)
    pts, vals, masks = traj.step_data(env, sensor)
    t1, to, t2 = crop.t1, crop.to, crop.t2
    odom = traj.odom[t1 : t2 + 1]
    occ_pts, occ_vals = pts[t1 : t2 + 1], vals[t1 : t2 + 1]
    deltas = relative_arr(odom[:-1], odom[1:])
    return Segment(
        anchor=odom[0].copy(),
        deltas=deltas,
        actions=traj.actions[t1:t2].copy(),
        occ_points=occ_pts,
        occ_values=occ_vals,
        n_ref=to - t1 + 1,
        mask_cells=masks[t1 : t2 + 1],
        frame=traj.frame(env.resolution),
        closure=mapper.closure_residuals(odom, deltas),
    )


def consistency_loss(
    theta: LocalizerParams,
    traj: Trajectory,
    env: Environment,
    crop: CropTriple | None = None,
    loss_kind: str = "mse",
    supervision: str = "stepwise",
    sensor: SensorSpec = SensorSpec(),
    need_grad: bool = True,
    freeze_anchor: bool = False,
):
    """Loss and gradient of one (cropped) round trip; ``crop=None`` means the full trip."""
    crop = CropTriple.full(traj) if crop is None else crop
    seg = make_segment(traj, env, crop, sensor)
    res = mapper.grad_consistency(
        theta, seg, loss_kind, supervision, need_grad=need_grad, freeze_anchor=freeze_anchor
    )
    return res.loss, res.grad


# --- adaptation -----------------------------------------------------------------

@dataclass
class AdaptConfig:
    loss_kind: str = "mse"
    supervision: str = "stepwise"
    crops_per_traj: int = 3  # 0 disables augmentation
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 4
    rng_seed: int = 0
    schedule: str = "constant"  # or "cosine": lr decays to 0 over all updates
    weight_decay: float = 100.0  # L2 pull of theta toward theta_init, added to the loss gradient
    grad_floor: float = 1e-10  # gradient components below this are roundoff; Adam would amplify them
    freeze_anchor: bool = True  # treat the pivot pose estimate as part of the constant reference

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1:
            raise ValueError("learning_rate must be > 0 and epochs >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError("schedule must be constant|cosine")
        if self.loss_kind not in ("mse", "bce") or self.supervision not in ("stepwise", "last_step"):
            raise ValueError("loss_kind must be mse|bce and supervision stepwise|last_step")


class Adam:
    def __init__(self, params: np.ndarray, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = np.array(params, dtype=float)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros_like(self.params)
        self.v = np.zeros_like(self.params)
        self.t = 0

    def step(self, grad: np.ndarray, lr: float | None = None) -> np.ndarray:
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        self.params = self.params - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return self.params


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def add(self, epoch, traj_id, crop, loss, grad_norm):
        self.rows.append(
            {"epoch": epoch, "traj_id": traj_id, "crop": crop, "loss": float(loss), "grad_norm": float(grad_norm)}
        )

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["epoch", "traj_id", "crop", "loss", "grad_norm"])
            w.writeheader()
            w.writerows(self.rows)


def _lr_at(config: AdaptConfig, k: int, total: int) -> float:
    if config.schedule == "cosine":
        return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * k / total))
    return config.learning_rate


def _floor(g: np.ndarray, tol: float) -> np.ndarray:
    return np.where(np.abs(g) < tol, 0.0, g)


def _crop_label(c: CropTriple) -> str:
    return f"{c.t1}-{c.to}-{c.t2}"


def adapt(
    theta_init: LocalizerParams,
    trajectories: Sequence[Trajectory],
    envs,
    config: AdaptConfig = AdaptConfig(),
    sensor: SensorSpec = SensorSpec(),
) -> tuple[LocalizerParams, TrainingLog]:
    """Self-supervised fine-tuning of the localizer on round trips (actions + odometry only).

    ``envs`` is one Environment shared by all trajectories or a sequence aligned
    with them; it is only used to regenerate observations.
    """
    if not trajectories:
        raise ValueError("adapt needs at least one trajectory")
    envs = _env_list(envs, trajectories)
    rng = random_stream(config.rng_seed, 17)
    theta0 = theta_init.flat()
    opt = Adam(theta0, config.learning_rate, config.beta1, config.beta2, config.epsilon)
    log_ = TrainingLog()
    total = config.epochs * len(trajectories) * (1 + config.crops_per_traj)
    for epoch in range(config.epochs):
        for i in rng.permutation(len(trajectories)):
            traj, env = trajectories[i], envs[i]
            crops = [CropTriple.full(traj)]
            if config.crops_per_traj > 0:
                crops += sample_crops(traj, config.crops_per_traj, rng)
            for crop in crops:
                seg = make_segment(traj, env, crop, sensor)
                theta = LocalizerParams.from_flat(opt.params)
                res = mapper.grad_consistency(
                    theta, seg, config.loss_kind, config.supervision, freeze_anchor=config.freeze_anchor
                )
                g = res.grad.flat()
                if not (math.isfinite(res.loss) and np.all(np.isfinite(g))):
                    raise FloatingPointError(
                        f"non-finite loss/gradient on trajectory {traj.traj_id or i} crop {_crop_label(crop)}"
                    )
                log_.add(epoch, traj.traj_id or str(i), _crop_label(crop), res.loss, np.linalg.norm(g))
                if config.weight_decay:
                    g = g + config.weight_decay * (opt.params - theta0)
                opt.step(_floor(g, config.grad_floor), _lr_at(config, opt.t, total))
    return LocalizerParams.from_flat(opt.params), log_


def _env_list(envs, trajectories):
    if isinstance(envs, Environment):
        return [envs] * len(trajectories)
    envs = list(envs)
    if len(envs) != len(trajectories):
        raise ValueError("need one environment per trajectory")
    return envs


def gt_pose_loss(theta: LocalizerParams, traj: Trajectory, need_grad: bool = True):
    """Sum over steps of squared pose error (m, m, rad weighted equally) and its gradient."""
    deltas = relative_arr(traj.odom[:-1], traj.odom[1:])
    closure = mapper.closure_residuals(traj.odom, deltas)
    poses, corr = mapper.integrate(theta, traj.odom[0], deltas, traj.actions, closure)
    err = poses - traj.gt
    err[:, 2] = wrap_angle(err[:, 2])
    loss = float(np.sum(err[1:] ** 2))
    if not need_grad:
        return loss, None
    bar = 2.0 * err
    bar[0] = 0.0
    return loss, mapper.integrate_backward(theta, poses, corr, deltas, traj.actions, bar)


def adapt_gt(
    theta_init: LocalizerParams, trajectories: Sequence[Trajectory], config: AdaptConfig = AdaptConfig()
) -> tuple[LocalizerParams, TrainingLog]:
    """Upper-bound arm: same loop, supervised by ground-truth poses."""
    if not trajectories:
        raise ValueError("adapt_gt needs at least one trajectory")
    rng = random_stream(config.rng_seed, 23)
    opt = Adam(theta_init.flat(), config.learning_rate, config.beta1, config.beta2, config.epsilon)
    log_ = TrainingLog()
    for epoch in range(config.epochs):
        for i in rng.permutation(len(trajectories)):
            traj = trajectories[i]
            loss, grad = gt_pose_loss(LocalizerParams.from_flat(opt.params), traj)
            g = grad.flat()
            if not (math.isfinite(loss) and np.all(np.isfinite(g))):
                raise FloatingPointError(f"non-finite loss/gradient on trajectory {traj.traj_id or i}")
            log_.add(epoch, traj.traj_id or str(i), "full", loss, np.linalg.norm(g))
            opt.step(_floor(g, config.grad_floor), _lr_at(config, opt.t, config.epochs * len(trajectories)))
    return LocalizerParams.from_flat(opt.params), log_


@dataclass(frozen=True)
class CollectJob:
    env_seed: int
    env_spec: EnvSpec
    act_noise: ActuationNoiseParams
    odo_noise: OdometryNoiseParams
    n_forward: int
    keys: tuple  # random-stream keys of this trajectory
    traj_id: str = ""
    noise_preset: str = ""


def run_collect_job(job: CollectJob) -> Trajectory:
    env = cached_environment(job.env_seed, job.env_spec)
    traj = collect_trajectory(
        env, forward_policy_step, job.n_forward, job.act_noise, job.odo_noise, random_stream(*job.keys)
    )
    traj.env_spec = asdict(job.env_spec)
    traj.noise_preset = job.noise_preset
    traj.rng_seed = int(job.keys[0])
    traj.traj_id = job.traj_id
    return traj


def collect_many(jobs_list: Sequence[CollectJob], jobs: int = 1) -> list[Trajectory]:
    return pmap(run_collect_job, jobs_list, jobs)


def adapt_dr(
    theta_init: LocalizerParams,
    env_pool: Sequence[tuple[int, EnvSpec]],
    noise_sampler: Callable = sample_dr_noise,
    config: AdaptConfig = AdaptConfig(),
    n_trajectories: int = 800,
    forward_steps: int = 100,
    jobs: int = 1,
) -> tuple[LocalizerParams, TrainingLog]:
    """Domain-randomisation arm: ground-truth supervision on freshly randomised noise.

    Every trajectory gets its own noise bundle ``noise_sampler(rng)`` and a world
    from ``env_pool`` (pairs of seed and spec, used round-robin).
    """
    if n_trajectories < 1 or not env_pool:
        raise ValueError("adapt_dr needs at least one trajectory and one environment")
    todo = []
    for i in range(n_trajectories):
        act, odo = noise_sampler(random_stream(config.rng_seed, DR_STREAM, i, 0))
        seed, spec = env_pool[i % len(env_pool)]
        todo.append(
            CollectJob(seed, spec, act, odo, forward_steps, (config.rng_seed, DR_STREAM, i, 1), f"dr-{i:04d}", "dr")
        )
    trajs = collect_many(todo, jobs)
    return adapt_gt(theta_init, trajs, config)


def final_errors(theta: LocalizerParams, trajectories: Sequence[Trajectory]) -> np.ndarray:
    """Final-step (position m, heading rad) error of every trajectory."""
    out = []
    for traj in trajectories:
        deltas = relative_arr(traj.odom[:-1], traj.odom[1:])
        closure = mapper.closure_residuals(traj.odom, deltas)
        poses, _ = mapper.integrate(theta, traj.odom[0], deltas, traj.actions, closure)
        e = poses[-1] - traj.gt[-1]
        out.append((math.hypot(e[0], e[1]), abs(wrap_angle(e[2]))))
    return np.array(out)
