"""Differentiable Gaussian splatting on the CPU.

Forward: EWA projection of every Gaussian, one global stable sort by
camera depth, 16x16 tile binning and front-to-back alpha compositing of
colour and depth. Backward: per-pixel reverse compositing in the tile
kernels followed by a vectorised chain rule through the projection, the
Gaussian parameterisation and (optionally) the hybrid motion model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

# TBB in this image is too old for numba; the workqueue layer is always present.
numba.config.THREADING_LAYER = "workqueue"

from . import _raster_kernels as K_
from .camera import Extrinsics, Intrinsics
from .errors import ContractError
from .gaussians import MotionModel, PosedCloud, pose_backward

NEAR = 0.01
COV_FLOOR = 0.3
TILE = K_.TILE
ALPHA_MIN = K_.ALPHA_MIN
ALPHA_MAX = K_.ALPHA_MAX
T_MIN = K_.T_MIN


def set_workers(n):
    """Thread count for the tile kernels (``1`` gives bitwise determinism)."""
    if n is not None:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


@dataclass
class Splat2D:
    mu2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray
    source_index: int


@dataclass
class Projection:
    """Batched projection of a posed cloud into one camera."""

    valid: np.ndarray
    cam_means: np.ndarray
    mu2d: np.ndarray
    cov3d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray  # (N, 3): a, b, c of the inverse covariance
    J: np.ndarray
    M3: np.ndarray  # R diag(s)
    opacity: np.ndarray
    radius: np.ndarray


def project_cloud(means, rotations, log_scales, opacity_logits, K: Intrinsics, E: Extrinsics) -> Projection:
    W = E.R
    pc = means @ W.T + E.t
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    valid = z > NEAR
    zs = np.where(valid, z, 1.0)
    S = np.exp(log_scales)
    M3 = rotations * S[:, None, :]
    cov3d = M3 @ np.swapaxes(M3, 1, 2)
    n = len(means)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = K.fx / zs
    J[:, 0, 2] = -K.fx * x / zs**2
    J[:, 1, 1] = K.fy / zs
    J[:, 1, 2] = -K.fy * y / zs**2
    Mj = J @ W
    cov2d = Mj @ cov3d @ np.swapaxes(Mj, 1, 2)
    cov2d[:, 0, 0] += COV_FLOOR
    cov2d[:, 1, 1] += COV_FLOOR
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mu2d = np.stack([K.fx * x / zs + K.cx, K.fy * y / zs + K.cy], axis=1)
    opacity = 1.0 / (1.0 + np.exp(-opacity_logits))
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    valid &= opacity > ALPHA_MIN
    m = np.sqrt(2.0 * np.log(np.maximum(opacity, ALPHA_MIN) / ALPHA_MIN))
    radius = np.where(valid, m * np.sqrt(lam) + 1.0, 0.0)
    return Projection(valid, pc, mu2d, cov3d, cov2d, conic, J, M3, opacity, radius)


def project_gaussian(mean, rotation, log_scale, opacity_logit, color, K: Intrinsics, E: Extrinsics,
                     index=0):
    """Project one Gaussian; returns ``None`` when it is culled (behind the near plane)."""
    p = project_cloud(np.reshape(mean, (1, 3)), np.reshape(rotation, (1, 3, 3)),
                      np.reshape(log_scale, (1, 3)), np.reshape(opacity_logit, (1,)), K, E)
    if not p.valid[0]:
        return None
    return Splat2D(p.mu2d[0], p.cov2d[0], float(p.cam_means[0, 2]), float(p.opacity[0]),
                   np.asarray(color, dtype=float).reshape(3), index)


@dataclass
class RenderTarget:
    rgb: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    aux: dict = field(default=None, repr=False)

    def normalized_depth(self, eps=1e-6):
        """Depth divided by accumulated alpha (0 where alpha <= eps)."""
        return np.where(self.alpha > eps, self.depth / np.maximum(self.alpha, eps), 0.0)


def _tile_rects(proj: Projection, width, height):
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    mu, r = proj.mu2d, proj.radius
    with np.errstate(invalid="ignore"):
        x0 = np.clip(np.floor((mu[:, 0] - r) / TILE), 0, tiles_x)
        x1 = np.clip(np.floor((mu[:, 0] + r) / TILE) + 1, 0, tiles_x)
        y0 = np.clip(np.floor((mu[:, 1] - r) / TILE), 0, tiles_y)
        y1 = np.clip(np.floor((mu[:, 1] + r) / TILE) + 1, 0, tiles_y)
    rect = np.stack([x0, y0, x1, y1], axis=1)
    rect[~proj.valid] = 0
    rect = np.nan_to_num(rect).astype(np.int64)
    return rect, tiles_x, tiles_y


def render(posed: PosedCloud, K: Intrinsics, E: Extrinsics, background=(0.0, 0.0, 0.0)) -> RenderTarget:
    n = len(posed)
    if n < 1:
        raise ContractError("render needs at least one Gaussian")
    bg = np.asarray(background, dtype=float).reshape(3)
    proj = project_cloud(posed.means, posed.rotations, posed.log_scales, posed.opacity_logits, K, E)
    idx = np.flatnonzero(proj.valid)
    order = idx[np.argsort(proj.cam_means[idx, 2], kind="stable")]
    rect, tiles_x, tiles_y = _tile_rects(proj, K.width, K.height)
    ranges, point_list = K_.bin_gaussians(order, rect, tiles_x, tiles_y)
    colors = np.ascontiguousarray(posed.colors, dtype=float)
    depth = np.ascontiguousarray(proj.cam_means[:, 2])
    mu2d = np.ascontiguousarray(proj.mu2d)
    conic = np.ascontiguousarray(proj.conic)
    rgb, dep, t_final, n_contrib = K_.render_tiles(
        ranges, point_list, mu2d, conic, proj.opacity, colors, depth, bg, K.width, K.height, tiles_x)
    aux = {
        "posed": posed, "K": K, "E": E, "bg": bg, "proj": proj, "order": order,
        "ranges": ranges, "point_list": point_list, "tiles_x": tiles_x,
        "t_final": t_final, "n_contrib": n_contrib,
    }
    return RenderTarget(rgb, dep, 1.0 - t_final, aux)


@dataclass
class GradientBuffer:
    """Per-Gaussian partial derivatives of a scalar loss.

    World-space fields always present; ``canonical_means``, ``quats``,
    ``coeffs`` (``(N_dyn, B)`` at the rendered frame) and ``trainable`` are
    filled when a motion model is supplied to ``render_backward``.
    """

    means: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    mu2d: np.ndarray
    canonical_means: np.ndarray = None
    quats: np.ndarray = None
    coeffs: np.ndarray = None
    trainable: np.ndarray = None
    frame: int = None


def render_backward(target: RenderTarget, d_rgb, d_depth=None, d_alpha=None,
                    model: MotionModel = None) -> GradientBuffer:
    aux = target.aux
    if not aux or "point_list" not in aux:
        raise ContractError("render_backward needs the RenderTarget returned by render()")
    K, E, posed, proj = aux["K"], aux["E"], aux["posed"], aux["proj"]
    shape = (K.height, K.width)
    d_rgb = np.ascontiguousarray(d_rgb, dtype=float)
    if d_rgb.shape != shape + (3,):
        raise ContractError(f"d_rgb has shape {d_rgb.shape}, forward pass rendered {shape + (3,)}")
    d_depth = np.zeros(shape) if d_depth is None else np.ascontiguousarray(d_depth, dtype=float)
    d_alpha = np.zeros(shape) if d_alpha is None else np.ascontiguousarray(d_alpha, dtype=float)
    if d_depth.shape != shape or d_alpha.shape != shape:
        raise ContractError("d_depth / d_alpha shape does not match the forward pass")

    n = len(posed)
    point_list = aux["point_list"]
    slots = K_.backward_tiles(
        aux["ranges"], point_list, np.ascontiguousarray(proj.mu2d), np.ascontiguousarray(proj.conic),
        proj.opacity, np.ascontiguousarray(posed.colors, dtype=float),
        np.ascontiguousarray(proj.cam_means[:, 2]), aux["bg"], K.width, K.height, aux["tiles_x"],
        aux["t_final"], aux["n_contrib"], d_rgb, d_depth, d_alpha)
    g = np.zeros((n, K_.N_SLOT))
    for j in range(K_.N_SLOT):
        g[:, j] = np.bincount(point_list, weights=slots[:, j], minlength=n)

    g_mu2d = g[:, 0:2]
    g_conic = g[:, 2:5]
    g_opac = g[:, 5]
    g_color = g[:, 6:9]
    g_z = g[:, 9].copy()

    v = proj.valid
    # conic = inverse(cov2d); symmetric gradient with the off-diagonal split
    Gq = np.zeros((n, 2, 2))
    Gq[:, 0, 0] = g_conic[:, 0]
    Gq[:, 0, 1] = Gq[:, 1, 0] = 0.5 * g_conic[:, 1]
    Gq[:, 1, 1] = g_conic[:, 2]
    Q = np.zeros((n, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 1], proj.conic[:, 2]
    G2 = -Q @ Gq @ Q

    W = E.R
    Mj = proj.J @ W
    G3 = np.swapaxes(Mj, 1, 2) @ G2 @ Mj
    gMj = 2.0 * G2 @ Mj @ proj.cov3d
    gJ = gMj @ W.T

    pc = proj.cam_means
    x, y = pc[:, 0], pc[:, 1]
    z = np.where(v, pc[:, 2], 1.0)
    g_pc = np.zeros((n, 3))
    g_pc[:, 0] = g_mu2d[:, 0] * K.fx / z - gJ[:, 0, 2] * K.fx / z**2
    g_pc[:, 1] = g_mu2d[:, 1] * K.fy / z - gJ[:, 1, 2] * K.fy / z**2
    g_pc[:, 2] = (
        g_z
        - g_mu2d[:, 0] * K.fx * x / z**2
        - g_mu2d[:, 1] * K.fy * y / z**2
        - gJ[:, 0, 0] * K.fx / z**2
        + gJ[:, 0, 2] * 2.0 * K.fx * x / z**3
        - gJ[:, 1, 1] * K.fy / z**2
        + gJ[:, 1, 2] * 2.0 * K.fy * y / z**3
    )
    g_means = g_pc @ W

    gM3 = 2.0 * G3 @ proj.M3
    S = np.exp(posed.log_scales)
    g_rot = gM3 * S[:, None, :]
    g_S = np.einsum("nik,nik->nk", gM3, posed.rotations)
    g_logs = g_S * S
    g_logit = g_opac * proj.opacity * (1.0 - proj.opacity)

    for arr in (g_means, g_rot, g_logs, g_logit, g_color, g_mu2d):
        arr[~v] = 0.0

    buf = GradientBuffer(g_means, g_rot, g_logs, g_logit, g_color, g_mu2d, frame=posed.frame)
    if model is not None and posed.canonical_means is not None:
        d_mu0, d_q, d_c, d_tr = pose_backward(posed, model, g_means, g_rot)
        buf.canonical_means, buf.quats, buf.coeffs, buf.trainable = d_mu0, d_q, d_c, d_tr
    return buf


def pixel_contributors(target: RenderTarget, u, v):
    """Blend weights ``T_i * alpha_i`` of every Gaussian composited at pixel (u, v).

    Returns ``(indices, weights)`` in front-to-back order.
    """
    aux = target.aux
    K = aux["K"]
    if not (0 <= u < K.width and 0 <= v < K.height):
        raise ContractError(f"pixel ({u}, {v}) outside the image")
    tile = (v // TILE) * aux["tiles_x"] + (u // TILE)
    start = aux["ranges"][tile, 0]
    proj = aux["proj"]
    idx, wts = [], []
    T = 1.0
    for k in range(start, start + aux["n_contrib"][v, u]):
        g = aux["point_list"][k]
        dx, dy = u - proj.mu2d[g, 0], v - proj.mu2d[g, 1]
        a, b, c = proj.conic[g]
        power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
        if power > 0:
            continue
        alpha = proj.opacity[g] * math.exp(power)
        if alpha < ALPHA_MIN:
            continue
        alpha = min(alpha, ALPHA_MAX)
        idx.append(int(g))
        wts.append(T * alpha)
        T *= 1.0 - alpha
    return np.asarray(idx, dtype=np.int64), np.asarray(wts)
