"""Canonical Gaussian cloud and the hybrid motion-basis model.

Each dynamic Gaussian ``i`` owns a row of coefficients per frame. At frame
``t`` its rigid motion is ``exp(sum_b C[i, t, b] * basis_b)`` where the
first six bases are the frozen SE(3) generators and the rest are trainable
twists shared by all Gaussians. Scale, opacity and colour never change with
time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .se3 import (
    RigidTransform,
    fixed_generator_matrix,
    hat,
    quat_to_rotmat,
    quat_to_rotmat_vjp,
    se3_exp_batch,
    se3_left_jacobian,
)

N_FIXED = 6


@dataclass
class GaussianCloud:
    """Structure-of-arrays Gaussian set in the canonical frame.

    ``log_scales`` are stored as logs and ``opacity_logits`` as logits; use
    ``scales`` and ``opacities`` for the activated values.
    """

    means: np.ndarray  # (N, 3)
    quats: np.ndarray  # (N, 4) w, x, y, z
    log_scales: np.ndarray  # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3) in [0, 1]
    dynamic: np.ndarray = None  # (N,) bool

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float).reshape(-1, 3)
        n = len(self.means)
        if n < 1:
            raise ValidationError("a GaussianCloud needs at least one Gaussian")
        self.quats = np.asarray(self.quats, dtype=float).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=float).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=float).reshape(n)
        self.colors = np.asarray(self.colors, dtype=float).reshape(n, 3)
        if self.dynamic is None:
            self.dynamic = np.ones(n, dtype=bool)
        self.dynamic = np.asarray(self.dynamic, dtype=bool).reshape(n)

    def __len__(self):
        return len(self.means)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def rotations(self):
        return quat_to_rotmat(self.quats)

    @property
    def n_dynamic(self):
        return int(self.dynamic.sum())

    def dynamic_rows(self):
        """Coefficient row for every Gaussian (-1 for static ones)."""
        rows = np.full(len(self), -1, dtype=np.int64)
        rows[self.dynamic] = np.arange(self.n_dynamic)
        return rows

    def subset(self, index):
        index = np.asarray(index)
        return GaussianCloud(self.means[index], self.quats[index], self.log_scales[index],
                             self.opacity_logits[index], self.colors[index], self.dynamic[index])

    def copy(self):
        return self.subset(np.arange(len(self)))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


@dataclass
class MotionModel:
    """Hybrid motion bases plus per-Gaussian, per-frame coefficients.

    ``trainable`` holds the ``B - 6`` learnable twists (rows are
    ``(omega, v)``); ``coeffs`` has shape ``(N_dyn, F, B)`` with the six
    fixed-basis weights first.
    """

    trainable: np.ndarray
    coeffs: np.ndarray
    canonical_frame: int = 0
    fixed: np.ndarray = field(default_factory=fixed_generator_matrix, repr=False)

    def __post_init__(self):
        self.trainable = np.asarray(self.trainable, dtype=float).reshape(-1, 6)
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.ndim != 3 or self.coeffs.shape[2] != self.B:
            raise ValidationError(
                f"coefficients must have shape (N_dyn, F, {self.B}), got {self.coeffs.shape}"
            )
        if not 0 <= self.canonical_frame < max(self.F, 1):
            raise ValidationError(f"canonical frame {self.canonical_frame} outside 0..{self.F - 1}")

    @classmethod
    def zeros(cls, n_dynamic, n_frames, n_bases=15, canonical_frame=None, rng=None, init_std=0.01):
        """Zero coefficients; trainable translations drawn from N(0, init_std^2)."""
        if n_bases < N_FIXED:
            raise ValidationError(f"basis count must be >= 6, got {n_bases}")
        rng = np.random.default_rng(rng)
        trainable = np.zeros((n_bases - N_FIXED, 6))
        trainable[:, 3:] = rng.normal(0.0, init_std, size=(n_bases - N_FIXED, 3))
        t0 = n_frames // 2 if canonical_frame is None else canonical_frame
        return cls(trainable, np.zeros((n_dynamic, n_frames, n_bases)), t0)

    @property
    def B(self):
        return N_FIXED + len(self.trainable)

    @property
    def F(self):
        return self.coeffs.shape[1]

    @property
    def bases(self):
        return np.concatenate([self.fixed, self.trainable], axis=0)

    def copy(self):
        return replace(self, trainable=self.trainable.copy(), coeffs=self.coeffs.copy())

    def twists(self, t):
        """Twist per dynamic Gaussian at frame ``t`` (shape ``(N_dyn, 6)``)."""
        return self.coeffs[:, t, :] @ self.bases


def compose_motion(coeff_row, model: MotionModel) -> RigidTransform:
    coeff_row = np.asarray(coeff_row, dtype=float)
    if coeff_row.shape != (model.B,):
        raise ValidationError(f"coefficient row must have length {model.B}, got {coeff_row.shape}")
    if not np.all(np.isfinite(coeff_row)):
        raise ValidationError("non-finite motion coefficients")
    R, t = se3_exp_batch(coeff_row @ model.bases)
    return RigidTransform(R, t)


@dataclass
class PosedCloud:
    """World-space Gaussians at one frame. Regenerated by ``pose_at_time``."""

    means: np.ndarray
    rotations: np.ndarray  # (N, 3, 3)
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    frame: int = None
    # Kept for the backward pass through the motion model.
    canonical_means: np.ndarray = field(default=None, repr=False)
    canonical_rotations: np.ndarray = field(default=None, repr=False)
    quats: np.ndarray = field(default=None, repr=False)
    dynamic: np.ndarray = field(default=None, repr=False)
    twists: np.ndarray = field(default=None, repr=False)
    motion_rotations: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.means)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)


def static_pose(cloud: GaussianCloud) -> PosedCloud:
    """The canonical cloud as a PosedCloud (no motion applied)."""
    R0 = cloud.rotations
    return PosedCloud(cloud.means.copy(), R0, cloud.log_scales, cloud.opacity_logits, cloud.colors,
                      None, cloud.means, R0, cloud.quats, np.zeros(len(cloud), dtype=bool),
                      np.zeros((0, 6)), np.zeros((0, 3, 3)))


def pose_at_time(cloud: GaussianCloud, model: MotionModel, t: int) -> PosedCloud:
    if not 0 <= t < model.F:
        raise ValidationError(f"frame {t} out of range 0..{model.F - 1}")
    if model.coeffs.shape[0] != cloud.n_dynamic:
        raise ValidationError(
            f"motion model has {model.coeffs.shape[0]} rows but cloud has {cloud.n_dynamic} dynamic Gaussians"
        )
    xi = model.twists(t)
    Rm, tm = se3_exp_batch(xi)
    R0 = cloud.rotations
    means = cloud.means.copy()
    rots = R0.copy()
    dyn = cloud.dynamic
    means[dyn] = np.einsum("nij,nj->ni", Rm, cloud.means[dyn]) + tm
    rots[dyn] = Rm @ R0[dyn]
    return PosedCloud(means, rots, cloud.log_scales, cloud.opacity_logits, cloud.colors,
                      t, cloud.means, R0, cloud.quats, dyn, xi, Rm)


def pose_backward(posed: PosedCloud, model: MotionModel, d_means, d_rotations):
    """Pull world-space gradients back to canonical and motion parameters.

    Returns ``(d_canonical_means, d_quats, d_coeffs_t, d_trainable)`` where
    ``d_coeffs_t`` has shape ``(N_dyn, B)`` for the posed frame.
    """
    d_means = np.asarray(d_means, dtype=float)
    d_rot = np.asarray(d_rotations, dtype=float)
    dyn = posed.dynamic
    d_mu0 = d_means.copy()
    d_R0 = d_rot.copy()
    n_dyn = int(dyn.sum())
    d_coeffs = np.zeros((n_dyn, model.B))
    d_trainable = np.zeros_like(model.trainable)
    if n_dyn:
        Rm = posed.motion_rotations
        gm = d_means[dyn]
        gR = d_rot[dyn]
        d_mu0[dyn] = np.einsum("nji,nj->ni", Rm, gm)
        d_R0[dyn] = np.swapaxes(Rm, 1, 2) @ gR
        # Left-perturbation gradient: exp(d^) acting on (mu_t, R_t).
        mu_t = posed.means[dyn]
        R_t = posed.rotations[dyn]
        g_omega = np.cross(mu_t, gm)
        gens = hat(np.eye(3))  # [e_k]_x
        g_omega += np.einsum("nij,kil,nlj->nk", gR, gens, R_t)
        g_left = np.concatenate([g_omega, gm], axis=1)
        Jl = se3_left_jacobian(posed.twists)
        g_xi = np.einsum("nji,nj->ni", Jl, g_left)
        d_coeffs = g_xi @ model.bases.T
        c = model.coeffs[:, posed.frame, N_FIXED:]
        d_trainable = c.T @ g_xi
    d_quats = quat_to_rotmat_vjp(posed.quats, d_R0)
    return d_mu0, d_quats, d_coeffs, d_trainable


def track_gaussian(index, model: MotionModel, cloud: GaussianCloud, allow_static=False):
    """World-space mean of Gaussian ``index`` at every frame, shape ``(F, 3)``."""
    if not 0 <= index < len(cloud):
        raise ValidationError(f"Gaussian index {index} out of range")
    if not cloud.dynamic[index]:
        if not allow_static:
            raise ValidationError(f"Gaussian {index} is static; pass allow_static=True for its constant track")
        return np.repeat(cloud.means[index][None], model.F, axis=0)
    row = cloud.dynamic_rows()[index]
    xi = model.coeffs[row] @ model.bases
    R, t = se3_exp_batch(xi)
    return np.einsum("fij,j->fi", R, cloud.means[index]) + t


def track_gaussians(indices, model: MotionModel, cloud: GaussianCloud):
    """Vectorised ``track_gaussian`` for many indices (static ones stay constant)."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.repeat(cloud.means[indices][:, None, :], model.F, axis=1)
    rows = cloud.dynamic_rows()[indices]
    dyn = rows >= 0
    if np.any(dyn):
        xi = model.coeffs[rows[dyn]] @ model.bases
        R, t = se3_exp_batch(xi)
        out[dyn] = np.einsum("qfij,qj->qfi", R, cloud.means[indices[dyn]]) + t
    return out


# ---------------------------------------------------------------------------
# Downsampling and density control
# ---------------------------------------------------------------------------

def _select(cloud: GaussianCloud, model: MotionModel, keep):
    keep = np.asarray(keep, dtype=np.int64)
    rows = cloud.dynamic_rows()[keep]
    new_model = replace(model, trainable=model.trainable.copy(), coeffs=model.coeffs[rows[rows >= 0]].copy())
    return cloud.subset(keep), new_model


def downsample(cloud: GaussianCloud, model: MotionModel, factor, seed=0, return_index=False):
    """Keep ``ceil(N_dyn * factor)`` dynamic Gaussians chosen uniformly at random."""
    if not 0 < factor <= 1:
        raise ValidationError(f"downsample factor must be in (0, 1], got {factor}")
    dyn_idx = np.flatnonzero(cloud.dynamic)
    n_keep = math.ceil(len(dyn_idx) * factor)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(dyn_idx, size=n_keep, replace=False)) if n_keep < len(dyn_idx) else dyn_idx
    keep = np.sort(np.concatenate([np.flatnonzero(~cloud.dynamic), chosen]))
    new_cloud, new_model = _select(cloud, model, keep)
    return (new_cloud, new_model, keep) if return_index else (new_cloud, new_model)


@dataclass
class DensifyOptions:
    grad_threshold: float = 2e-4  # NDC units per step
    percent_dense: float = 0.01  # fraction of scene extent separating clone from split
    prune_opacity: float = 5e-3
    split_scale: float = 1.6
    scene_extent: float = None  # default: radius of the cloud around its centroid
    max_gaussians: int = None


def scene_extent(means):
    c = means.mean(axis=0)
    return float(np.max(np.linalg.norm(means - c, axis=1))) or 1.0


def densify_and_prune(cloud: GaussianCloud, model: MotionModel, grads, opts: DensifyOptions = None,
                      mean_grads=None, rng=None, return_index=False):
    """3D-GS style clone / split / prune.

    ``grads`` are per-Gaussian screen-space gradient norms; ``mean_grads``
    (optional, ``(N, 3)``) gives the direction used to nudge clones. With
    ``return_index`` the source Gaussian of every output row is returned too.
    """
    opts = opts or DensifyOptions()
    rng = np.random.default_rng(rng)
    grads = np.asarray(grads, dtype=float).reshape(-1)
    if len(grads) != len(cloud):
        raise ValidationError(f"{len(grads)} gradient norms for {len(cloud)} Gaussians")
    extent = opts.scene_extent if opts.scene_extent is not None else scene_extent(cloud.means)
    size = cloud.scales.max(axis=1)
    high = grads >= opts.grad_threshold
    large = size > opts.percent_dense * extent
    clone = np.flatnonzero(high & ~large)
    split = np.flatnonzero(high & large)
    if opts.max_gaussians is not None:
        budget = max(opts.max_gaussians - len(cloud), 0)
        order = np.argsort(-grads[clone], kind="stable")
        clone = np.sort(clone[order[:budget]])
        budget -= len(clone)
        order = np.argsort(-grads[split], kind="stable")
        split = np.sort(split[order[:budget]])

    survivors = np.setdiff1d(np.arange(len(cloud)), split)
    source = [survivors, clone, split, split]
    means = [cloud.means[survivors]]

    # clones: copy and nudge along the descent direction
    cm = cloud.means[clone].copy()
    if mean_grads is not None and len(clone):
        g = np.asarray(mean_grads, dtype=float)[clone]
        n = np.linalg.norm(g, axis=1, keepdims=True)
        cm -= 0.01 * cloud.scales[clone] * np.where(n > 0, g / np.where(n > 0, n, 1.0), 0.0)
    means.append(cm)

    # splits: two children drawn from the parent's footprint, scale / 1.6
    R = cloud.rotations[split]
    s = cloud.scales[split]
    for _ in range(2):
        z = rng.normal(size=(len(split), 3)) * s
        means.append(cloud.means[split] + np.einsum("nij,nj->ni", R, z))

    src = np.concatenate(source)
    new = cloud.subset(src)
    new.means = np.concatenate(means, axis=0)
    n_keep_clone = len(survivors) + len(clone)
    new.log_scales[n_keep_clone:] -= math.log(opts.split_scale)

    rows = cloud.dynamic_rows()[src]
    new_model = replace(model, trainable=model.trainable.copy(), coeffs=model.coeffs[rows[rows >= 0]].copy())

    alive = np.flatnonzero(new.opacities >= opts.prune_opacity)
    if len(alive) == 0:
        alive = np.array([int(np.argmax(new.opacities))])
    if len(alive) < len(new):
        new, new_model = _select(new, new_model, alive)
        src = src[alive]
    return (new, new_model, src) if return_index else (new, new_model)
