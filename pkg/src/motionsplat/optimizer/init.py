"""Initial Gaussians from a depth map and initial motion from lifted 2D tracks."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.ndimage import map_coordinates
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from ..errors import ValidationError
from ..gaussians import N_FIXED, GaussianCloud, MotionModel, logit

log = logging.getLogger(__name__)

MIN_CLUSTER_TRACKS = 3  # smaller clusters are outlier tracks, not a rigid part
MIN_CLUSTER_FRACTION = 0.05
STATIC_TOL = 0.03  # fraction of the median track depth; lifting jitter scales with depth error


def backproject(u, v, depth, K, E):
    """World points for pixels ``(u, v)`` at camera depth ``depth``."""
    cam = np.stack([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth], axis=-1)
    return (cam - E.t) @ E.R


def init_cloud(dataset, frame, n_gaussians, rng, opacity=0.1, allow_resample=False) -> GaussianCloud:
    """One Gaussian per sampled pixel with a valid depth at ``frame``.

    Colours come from the frame, isotropic scales from the mean distance
    to the three nearest neighbours. All Gaussians are dynamic unless the
    dataset carries masks, in which case pixels outside the mask are static.
    """
    depth = dataset.depths[frame]
    vs, us = np.nonzero(depth > 0)
    if len(us) == 0:
        raise ValidationError(f"frame {frame} has no valid depth to initialise from")
    if n_gaussians > len(us) and not allow_resample:
        log.warning("requested %d Gaussians but only %d pixels have depth; using %d",
                    n_gaussians, len(us), len(us))
        n_gaussians = len(us)
    pick = rng.choice(len(us), size=n_gaussians, replace=n_gaussians > len(us))
    pick.sort()
    u, v = us[pick].astype(float), vs[pick].astype(float)
    if n_gaussians > len(us):
        u = u + rng.uniform(-0.5, 0.5, size=u.shape)
        v = v + rng.uniform(-0.5, 0.5, size=v.shape)
    E = dataset.trajectory.poses[frame]
    K = dataset.trajectory.intrinsics
    means = backproject(u, v, depth[vs[pick], us[pick]], K, E)
    colors = np.clip(dataset.frames[frame][vs[pick], us[pick]], 0.0, 1.0)
    k = min(4, len(means))
    if k > 1:
        d, _ = cKDTree(means).query(means, k=k)
        s = np.maximum(d[:, 1:].mean(axis=1), 1e-4)
    else:
        s = np.full(len(means), 0.01)
    log_scales = np.repeat(np.log(s)[:, None], 3, axis=1)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (len(means), 1))
    dynamic = None
    if dataset.masks is not None:
        dynamic = dataset.masks[frame][vs[pick], us[pick]]
    return GaussianCloud(means, quats, log_scales, np.full(len(means), float(logit(opacity))), colors, dynamic)


def _sample_depth(depth, u, v):
    """Bilinear depth at sub-pixel positions; nearest pixel where a neighbour has no depth."""
    h, w = depth.shape
    near = depth[np.clip(np.round(v).astype(int), 0, h - 1), np.clip(np.round(u).astype(int), 0, w - 1)]
    coords = np.stack([np.clip(v, 0, h - 1), np.clip(u, 0, w - 1)])
    bil = map_coordinates(depth, coords, order=1, mode="nearest")
    holes = map_coordinates((depth <= 0).astype(float), coords, order=1, mode="nearest") > 0
    return np.where(holes, near, bil)


def lift_tracks(dataset):
    """3D positions of every visible track sample with a valid depth.

    Returns ``(points (Q, F, 3), valid (Q, F))``.
    """
    tr = dataset.tracks
    F = dataset.n_frames
    K = dataset.trajectory.intrinsics
    pts = np.zeros(tr.positions.shape[:2] + (3,))
    valid = np.zeros(tr.visible.shape, bool)
    for t in range(F):
        E = dataset.trajectory.poses[t]
        u, v = tr.positions[:, t, 0], tr.positions[:, t, 1]
        d = _sample_depth(dataset.depths[t], u, v)
        ok = tr.visible[:, t] & (d > 0)
        pts[:, t] = backproject(u, v, d, K, E)
        valid[:, t] = ok
    return pts, valid


def _fill_missing(pts, valid):
    """Linear interpolation in time of missing samples (nearest at the ends)."""
    out = pts.copy()
    t = np.arange(pts.shape[1])
    for q in range(len(pts)):
        ok = valid[q]
        if ok.all() or not ok.any():
            continue
        for c in range(3):
            out[q, ~ok, c] = np.interp(t[~ok], t[ok], pts[q, ok, c])
    return out


def cluster_weights(points, centers, tau, normalize=True):
    """``exp(-d / tau)`` affinity of each point to each centre.

    With ``normalize`` the rows sum to one (computed stably in log space).
    """
    d = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
    logits = -d / tau
    if not normalize:
        return np.exp(logits)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


@dataclass
class MotionInit:
    model: MotionModel
    labels: np.ndarray  # cluster of every usable track (-1 when unusable)
    centers: np.ndarray  # (k, 3) canonical cluster centres
    query_points: np.ndarray  # (Q, 3) canonical lifted query points
    query_valid: np.ndarray  # (Q,) bool


def init_motion(dataset, cloud: GaussianCloud, n_bases, canonical_frame, rng, init_std=0.01) -> MotionInit:
    """Seed trainable bases and coefficients from k-means on lifted track displacements.

    Each cluster contributes one trainable basis: a pure translation along
    the cluster's dominant displacement direction. Coefficients follow the
    cluster's displacement along that direction, weighted by each Gaussian's
    affinity to the cluster centre.
    """
    F = dataset.n_frames
    n_dyn = cloud.n_dynamic
    model = MotionModel.zeros(n_dyn, F, n_bases, canonical_frame=canonical_frame, rng=rng, init_std=init_std)
    k = n_bases - N_FIXED
    pts, valid = lift_tracks(dataset)
    t0 = canonical_frame
    usable = valid[:, t0] & (valid.sum(axis=1) >= 2) if len(pts) else np.zeros(0, bool)
    labels = np.full(len(pts), -1)
    query_points = pts[:, t0] if len(pts) else np.zeros((0, 3))
    if k == 0 or usable.sum() < max(k, 2) or n_dyn == 0:
        if k > 0:
            log.warning("only %d usable tracks for %d trainable bases; motion starts at rest", usable.sum(), k)
        return MotionInit(model, labels, np.zeros((0, 3)), query_points, usable)
    filled = _fill_missing(pts[usable], valid[usable])
    disp = filled - filled[:, t0:t0 + 1]
    feats = disp.reshape(len(disp), -1)
    seed = int(rng.integers(2**31 - 1))
    if np.ptp(feats, axis=0).max() > 0:
        _, lab = kmeans2(feats, k, minit="++", seed=seed)
    else:
        lab = np.zeros(len(feats), dtype=int)  # identical trajectories: one cluster
    labels[usable] = lab
    canon = filled[:, t0]
    centers = np.zeros((k, 3))
    cluster_disp = np.zeros((k, F, 3))
    for j in range(k):
        members = lab == j
        if not members.any():
            continue
        centers[j] = canon[members].mean(axis=0)
        # median: a few badly lifted tracks must not set a cluster's motion
        cluster_disp[j] = np.median(disp[members], axis=0)
    sizes = np.bincount(lab, minlength=k)
    present = sizes > 0
    min_support = max(MIN_CLUSTER_TRACKS, int(np.ceil(MIN_CLUSTER_FRACTION * len(lab))))
    tau = float(np.median(pdist(canon))) if len(canon) > 1 else 1.0
    tau = tau if tau > 0 else 1.0
    dyn_means = cloud.means[cloud.dynamic]
    cam_center = dataset.trajectory.poses[t0].center
    static_tol = STATIC_TOL * float(np.median(np.linalg.norm(canon - cam_center, axis=1)))
    w = np.zeros((n_dyn, k))
    w[:, present] = cluster_weights(dyn_means, centers[present], tau)
    for j in np.flatnonzero(present):
        D = cluster_disp[j]
        mag = np.linalg.norm(D, axis=1)
        # below this the displacement is lifting jitter, not motion
        if mag.max() < static_tol or sizes[j] < min_support:
            continue
        _, _, vt = np.linalg.svd(D, full_matrices=False)
        direction = vt[0]
        if D[np.argmax(mag)] @ direction < 0:
            direction = -direction
        model.trainable[j] = np.concatenate([np.zeros(3), direction])
        amount = D @ direction  # (F,)
        model.coeffs[:, :, N_FIXED + j] = w[:, j:j + 1] * amount[None, :]
    return MotionInit(model, labels, centers, query_points, usable)
