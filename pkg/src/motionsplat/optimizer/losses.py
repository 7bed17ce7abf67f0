"""Loss terms. Every function returns its value together with the gradient
with respect to whatever it consumes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..camera import Extrinsics, Intrinsics
from ..gaussians import N_FIXED, GaussianCloud
from .metrics import ssim

NEAR = 1e-6


def l1_loss(pred, target):
    diff = pred - target
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def ssim_loss(pred, target):
    """``1 - SSIM`` and its gradient."""
    value, grad = ssim(pred, target, return_grad=True)
    return 1.0 - value, -grad


def depth_loss(depth, alpha, target_depth, alpha_min=0.5):
    """L1 between alpha-normalised rendered depth and a target depth map.

    Pixels with ``alpha <= alpha_min`` or a non-positive target are ignored.
    Returns ``(value, d_depth, d_alpha)``.
    """
    mask = (alpha > alpha_min) & (target_depth > 0) & np.isfinite(target_depth)
    n = int(mask.sum())
    if n == 0:
        z = np.zeros_like(depth)
        return 0.0, z, z.copy()
    a = np.where(mask, alpha, 1.0)
    r = depth / a - np.where(mask, target_depth, 0.0)
    s = np.where(mask, np.sign(r), 0.0) / n
    value = float(np.abs(r)[mask].sum() / n)
    return value, s / a, -s * depth / (a * a)


def coefficient_loss(coeffs, lambda_fixed=0.8):
    """Mean over Gaussians and frames of the weighted squared coefficient norm.

    Fixed-basis entries are weighted by ``lambda_fixed`` and trainable ones
    by ``1 - lambda_fixed``.
    """
    n = coeffs.shape[0] * coeffs.shape[1]
    if n == 0:
        return 0.0, np.zeros_like(coeffs)
    w = np.full(coeffs.shape[2], 1.0 - lambda_fixed)
    w[:N_FIXED] = lambda_fixed
    value = float((coeffs**2 * w).sum() / n)
    return value, 2.0 * coeffs * w / n


def smoothness_loss(coeffs):
    """Mean squared change of the coefficient vector between consecutive frames."""
    n = coeffs.shape[0] * (coeffs.shape[1] - 1)
    grad = np.zeros_like(coeffs)
    if n <= 0:
        return 0.0, grad
    d = np.diff(coeffs, axis=1)
    value = float((d**2).sum() / n)
    grad[:, 1:] += 2.0 * d / n
    grad[:, :-1] -= 2.0 * d / n
    return value, grad


@dataclass
class TrackAnchors:
    """Soft assignment of each 2D query track to nearby canonical Gaussians."""

    query_ids: np.ndarray  # (Q,)
    index: np.ndarray  # (Q, k) Gaussian indices
    weights: np.ndarray  # (Q, k), rows sum to 1
    offsets: np.ndarray = None  # (Q, 3) query point minus weighted anchor mean, canonical frame

    def points(self, means):
        """Anchored query positions for per-Gaussian ``means`` at some frame."""
        X = np.einsum("qk,qki->qi", self.weights, means[self.index])
        return X if self.offsets is None else X + self.offsets


def build_track_anchors(cloud: GaussianCloud, query_points, query_ids=None, k=8, dynamic_only=True) -> TrackAnchors:
    """Attach each canonical query point to its ``k`` nearest Gaussians
    (dynamic ones only, by default) with inverse-distance weights, plus a
    fixed offset so the anchored point starts exactly at the query point."""
    query_points = np.asarray(query_points, dtype=float).reshape(-1, 3)
    q = len(query_points)
    ids = np.arange(q) if query_ids is None else np.asarray(query_ids)
    cand = np.flatnonzero(cloud.dynamic) if dynamic_only else np.arange(len(cloud))
    if len(cand) == 0 or q == 0:
        return TrackAnchors(ids[:0], np.zeros((0, 1), np.int64), np.zeros((0, 1)), np.zeros((0, 3)))
    k = min(k, len(cand))
    d, j = cKDTree(cloud.means[cand]).query(query_points, k=k)
    d = np.asarray(d).reshape(q, k)
    j = np.asarray(j).reshape(q, k)
    w = 1.0 / (d + 1e-6)
    w /= w.sum(axis=1, keepdims=True)
    index = cand[j]
    offsets = query_points - np.einsum("qk,qki->qi", w, cloud.means[index])
    return TrackAnchors(ids, index, w, offsets)


def track_loss(means, anchors: TrackAnchors, observed, visible, K: Intrinsics, E: Extrinsics):
    """Mean L1 reprojection error of anchored query points, in units of ``max(W, H)``.

    ``observed`` is ``(Q, 2)`` pixel positions for the anchors' queries at
    this frame and ``visible`` their visibility flags. Returns
    ``(value, d_means)``.
    """
    grad = np.zeros_like(means)
    if len(anchors.query_ids) == 0:
        return 0.0, grad
    X = anchors.points(means)
    W = E.R
    pc = X @ W.T + E.t
    z = pc[:, 2]
    use = np.asarray(visible, bool) & (z > NEAR)
    n = int(use.sum())
    if n == 0:
        return 0.0, grad
    zs = np.where(use, z, 1.0)
    pred = np.stack([K.fx * pc[:, 0] / zs + K.cx, K.fy * pc[:, 1] / zs + K.cy], axis=1)
    scale = float(max(K.width, K.height))
    diff = np.where(use[:, None], pred - observed, 0.0)
    value = float(np.abs(diff).sum() / (n * scale))
    g = np.sign(diff) / (n * scale)
    g_pc = np.zeros_like(pc)
    g_pc[:, 0] = g[:, 0] * K.fx / zs
    g_pc[:, 1] = g[:, 1] * K.fy / zs
    g_pc[:, 2] = -(g[:, 0] * K.fx * pc[:, 0] + g[:, 1] * K.fy * pc[:, 1]) / zs**2
    g_X = g_pc @ W
    np.add.at(grad, anchors.index, anchors.weights[..., None] * g_X[:, None, :])
    return value, grad
