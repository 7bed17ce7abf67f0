"""Procedural dynamic scenes with exact ground truth.

A synthetic scene is a Gaussian cloud moved by a known motion model and
filmed by a known camera path. Frames, depth maps and 2D tracks are
rendered from the ground truth; noise is optional and only affects the
training inputs, never the held-out images or the 3D trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..camera import CameraTrajectory, Extrinsics, default_intrinsics, make_trajectory
from ..errors import ValidationError
from ..gaussians import GaussianCloud, MotionModel, logit, pose_at_time
from ..rasterizer import pixel_contributors, render
from ..se3 import Twist, compose, fixed_generator_matrix, se3_exp, se3_log
from .dataset import HeldoutView, SceneDataset, TrackSet

MOTIONS = ("two-cluster", "rigid-translate", "rotate", "static")


@dataclass
class SynthConfig:
    n_gaussians: int = 200
    n_frames: int = 16
    width: int = 128
    height: int = 96
    fov_deg: float = 60.0
    motion: str = "two-cluster"
    camera: str = "arc"
    arc_degrees: float = 20.0
    radius: float = 3.5
    velocity: tuple = (0.03, 0.0, 0.0)  # scene units per frame
    spin: float = 0.05  # radians per frame
    image_noise: float = 0.0  # std of additive RGB noise
    depth_noise: float = 0.0  # relative std of depth noise
    track_noise: float = 0.0  # std of 2D track noise in pixels
    n_queries: int = 64
    heldout_times: tuple = None  # default: four evenly spaced frames
    background: tuple = (0.5, 0.5, 0.5)  # mid-gray: clipped pixel noise stays unbiased
    basis_count: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.motion not in MOTIONS:
            raise ValidationError(f"unknown motion {self.motion!r}; expected one of {', '.join(MOTIONS)}")
        if self.n_gaussians < 2 or self.n_frames < 2:
            raise ValidationError("a synthetic scene needs at least 2 Gaussians and 2 frames")


@dataclass
class SyntheticScene:
    dataset: SceneDataset
    cloud: GaussianCloud
    model: MotionModel
    labels: np.ndarray  # rigid group of each Gaussian
    query_points: np.ndarray  # (Q, F, 3) ground-truth 3D trajectories of the tracked points
    config: SynthConfig = field(repr=False, default=None)


def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return q


def _coeffs_for_twist(xi):
    """Fixed-basis coefficients reproducing twist ``xi``: the generators are a permutation."""
    return np.asarray(xi, float) @ fixed_generator_matrix().T


def _group_twists(cfg: SynthConfig, centers):
    """Per-frame twist of each rigid group."""
    vel = np.asarray(cfg.velocity, dtype=float).reshape(3)
    w = cfg.spin
    if cfg.motion == "two-cluster":
        # group 0 translates, group 1 translates the other way while spinning about its centre
        spin_b = np.array([0.0, w, 0.0])
        return [np.concatenate([np.zeros(3), vel]),
                np.concatenate([spin_b, -np.cross(spin_b, centers[1]) - vel])]
    if cfg.motion == "rigid-translate":
        return [np.concatenate([np.zeros(3), vel])]
    if cfg.motion == "rotate":
        om = np.array([0.0, w, 0.0])
        return [np.concatenate([om, -np.cross(om, centers[0])])]
    return [np.zeros(6)]


def make_ground_truth(cfg: SynthConfig, rng):
    n = cfg.n_gaussians
    if cfg.motion == "two-cluster":
        centers = np.array([[-0.6, 0.0, 0.0], [0.6, 0.0, 0.0]])
        labels = np.arange(n) % 2
    else:
        centers = np.zeros((1, 3))
        labels = np.zeros(n, dtype=np.int64)
    radius = 0.45 if len(centers) > 1 else 0.7
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / 3.0)
    means = centers[labels] + d * r[:, None]
    log_scales = np.log(rng.uniform(0.05, 0.11, size=(n, 3)))
    opacity = logit(rng.uniform(0.7, 0.95, size=n))
    phase = np.array([[0.0, 2.1, 4.2], [1.0, 3.1, 5.2]])[labels % 2]
    colors = 0.5 + 0.35 * np.sin(3.0 * means[:, [0, 1, 2]] + phase)
    colors = np.clip(colors + 0.05 * rng.normal(size=(n, 3)), 0.05, 0.95)
    cloud = GaussianCloud(means, _random_quats(rng, n), log_scales, opacity, colors)

    F = cfg.n_frames
    t0 = F // 2
    model = MotionModel.zeros(n, F, cfg.basis_count, canonical_frame=t0, rng=rng)
    for g, xi in enumerate(_group_twists(cfg, centers)):
        c = _coeffs_for_twist(xi)
        for t in range(F):
            model.coeffs[labels == g, t, :6] = c * (t - t0)
    return cloud, model, labels


def _interpolate(a: Extrinsics, b: Extrinsics, s=0.5) -> Extrinsics:
    rel = compose(a.pose.inverse(), b.pose)
    step = se3_exp(se3_log(rel) * s)
    return Extrinsics(compose(a.pose, step))


def heldout_cameras(traj: CameraTrajectory, times):
    """Cameras halfway between consecutive training poses, one per time."""
    out = []
    for t in times:
        a, b = (t, t + 1) if t + 1 < len(traj) else (t, t - 1)
        out.append(_interpolate(traj.poses[a], traj.poses[b]))
    return out


def _sample_queries(cfg, rng, cloud, model, traj, renders, labels):
    F = cfg.n_frames
    t0 = F // 2
    K = traj.intrinsics
    target = renders[t0]
    nd = target.normalized_depth()
    ys, xs = np.nonzero(target.alpha > 0.9)
    if len(xs) == 0:
        return np.zeros((0, F, 3)), TrackSet.empty(F)
    pick = rng.choice(len(xs), size=min(cfg.n_queries, len(xs)), replace=False)
    E0 = traj.poses[t0]
    pts, owners = [], []
    rows = cloud.dynamic_rows()
    for k in pick:
        u, v = int(xs[k]), int(ys[k])
        idx, w = pixel_contributors(target, u, v)
        if len(idx) == 0:
            continue
        cam = nd[v, u] * np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
        pts.append(E0.R.T @ (cam - E0.t))
        owners.append(int(idx[np.argmax(w)]))
    pts = np.asarray(pts)
    owners = np.asarray(owners)
    traj3d = np.zeros((len(pts), F, 3))
    for t in range(F):
        for q, (p, g) in enumerate(zip(pts, owners)):
            if rows[g] < 0:
                traj3d[q, t] = p
                continue
            xi = model.coeffs[rows[g], t] @ model.bases
            T = se3_exp(Twist.from_vector(xi))
            traj3d[q, t] = T.apply(p)
    pos = np.zeros((len(pts), F, 2))
    vis = np.zeros((len(pts), F), bool)
    for t in range(F):
        E = traj.poses[t]
        pc = traj3d[:, t] @ E.R.T + E.t
        z = pc[:, 2]
        u = K.fx * pc[:, 0] / z + K.cx
        v = K.fy * pc[:, 1] / z + K.cy
        pos[:, t, 0], pos[:, t, 1] = u, v
        inside = (z > 0) & (u >= -0.5) & (u <= K.width - 0.5) & (v >= -0.5) & (v <= K.height - 0.5)
        ui = np.clip(np.round(u).astype(int), 0, K.width - 1)
        vi = np.clip(np.round(v).astype(int), 0, K.height - 1)
        d = renders[t].normalized_depth()[vi, ui]
        a = renders[t].alpha[vi, ui]
        vis[:, t] = inside & (a > 0.5) & (np.abs(d - z) < 0.05 * z)
    if cfg.track_noise > 0:
        pos = pos + cfg.track_noise * rng.normal(size=pos.shape)
        pos[..., 0] = np.clip(pos[..., 0], -0.5, K.width - 0.5)
        pos[..., 1] = np.clip(pos[..., 1], -0.5, K.height - 0.5)
    return traj3d, TrackSet(np.arange(len(pts), dtype=np.int64), pos, vis)


def synth_scene(cfg: SynthConfig = None, **overrides) -> SyntheticScene:
    cfg = replace(cfg or SynthConfig(), **overrides)
    rng = np.random.default_rng(cfg.seed)
    cloud, model, labels = make_ground_truth(cfg, rng)
    K = default_intrinsics(cfg.width, cfg.height, cfg.fov_deg)
    traj = make_trajectory(cfg.camera, cfg.n_frames, K, radius=cfg.radius, arc_degrees=cfg.arc_degrees,
                           elevation=0.4)
    bg = np.asarray(cfg.background, float)
    renders = [render(pose_at_time(cloud, model, t), K, traj.poses[t], bg) for t in range(cfg.n_frames)]
    frames = np.stack([r.rgb for r in renders])
    depths = np.stack([np.where(r.alpha > 0.5, r.normalized_depth(), 0.0) for r in renders])
    query_points, tracks = _sample_queries(cfg, rng, cloud, model, traj, renders, labels)
    if cfg.image_noise > 0:
        frames = np.clip(frames + cfg.image_noise * rng.normal(size=frames.shape), 0.0, 1.0)
    if cfg.depth_noise > 0:
        depths = depths * (1.0 + cfg.depth_noise * rng.normal(size=depths.shape))
    times = cfg.heldout_times
    if times is None:
        times = np.unique(np.linspace(1, cfg.n_frames - 2, 4).round().astype(int))
    cams = heldout_cameras(traj, times)
    heldout = [HeldoutView(int(t), E, render(pose_at_time(cloud, model, int(t)), K, E, bg).rgb)
               for t, E in zip(times, cams)]
    ds = SceneDataset(frames, depths, tracks, traj, None, heldout, tuple(map(float, bg)))
    return SyntheticScene(ds.validate(), cloud, model, labels, query_points, cfg)


def perturb_trajectory(traj: CameraTrajectory, degrees, seed=0) -> CameraTrajectory:
    """Rotate every pose about a random axis through its camera centre by ``degrees``."""
    rng = np.random.default_rng(seed)
    poses = []
    for E in traj.poses:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        dR = se3_exp(Twist(axis * np.radians(degrees), np.zeros(3))).rotation
        poses.append(Extrinsics.from_center(dR @ E.R, E.center))
    return CameraTrajectory(traj.intrinsics, poses, traj.frame_rate)
