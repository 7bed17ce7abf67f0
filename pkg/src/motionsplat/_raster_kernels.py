"""Numba tile kernels for the splatting rasterizer.

Each tile is processed by one thread and owns its pixels; backward writes
into one gradient slot per (tile, Gaussian) list entry, so results do not
depend on the number of threads.
"""

import numba as nb
import numpy as np

TILE = 16
ALPHA_MAX = 0.99
T_MIN = 1e-4
# Splat support ends where alpha falls below this.
ALPHA_MIN = 1e-8
N_SLOT = 10  # mu2d 0-1, conic (a, b, c) 2-4, opacity 5, color 6-8, depth 9


@nb.njit(cache=True)
def bin_gaussians(order, rect, tiles_x, tiles_y):
    """Per-tile Gaussian lists, each in the global depth order ``order``.

    ``rect[g] = (tx0, ty0, tx1, ty1)`` (exclusive upper bounds).
    """
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for g in order:
        for ty in range(rect[g, 1], rect[g, 3]):
            for tx in range(rect[g, 0], rect[g, 2]):
                counts[ty * tiles_x + tx + 1] += 1
    for i in range(n_tiles):
        counts[i + 1] += counts[i]
    fill = counts[:-1].copy()
    point_list = np.empty(counts[-1], dtype=np.int64)
    for g in order:
        for ty in range(rect[g, 1], rect[g, 3]):
            for tx in range(rect[g, 0], rect[g, 2]):
                t = ty * tiles_x + tx
                point_list[fill[t]] = g
                fill[t] += 1
    ranges = np.empty((n_tiles, 2), dtype=np.int64)
    ranges[:, 0] = counts[:-1]
    ranges[:, 1] = counts[1:]
    return ranges, point_list


@nb.njit(parallel=True, cache=True)
def render_tiles(ranges, point_list, mu2d, conic, opac, color, depth, bg, width, height, tiles_x):
    n_tiles = ranges.shape[0]
    rgb = np.zeros((height, width, 3))
    dep = np.zeros((height, width))
    t_final = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    for tile in nb.prange(n_tiles):
        x0 = (tile % tiles_x) * TILE
        y0 = (tile // tiles_x) * TILE
        start = ranges[tile, 0]
        end = ranges[tile, 1]
        for py in range(y0, min(y0 + TILE, height)):
            for px in range(x0, min(x0 + TILE, width)):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                d = 0.0
                last = 0
                for k in range(start, end):
                    g = point_list[k]
                    dx = px - mu2d[g, 0]
                    dy = py - mu2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if power > 0.0:
                        continue
                    alpha = opac[g] * np.exp(power)
                    if alpha < ALPHA_MIN:
                        continue
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    test_T = T * (1.0 - alpha)
                    if test_T < T_MIN:
                        break
                    w = alpha * T
                    c0 += w * color[g, 0]
                    c1 += w * color[g, 1]
                    c2 += w * color[g, 2]
                    d += w * depth[g]
                    T = test_T
                    last = k - start + 1
                rgb[py, px, 0] = c0 + T * bg[0]
                rgb[py, px, 1] = c1 + T * bg[1]
                rgb[py, px, 2] = c2 + T * bg[2]
                dep[py, px] = d
                t_final[py, px] = T
                n_contrib[py, px] = last
    return rgb, dep, t_final, n_contrib


@nb.njit(parallel=True, cache=True)
def backward_tiles(ranges, point_list, mu2d, conic, opac, color, depth, bg, width, height, tiles_x,
                   t_final, n_contrib, g_rgb, g_depth, g_alpha):
    n_tiles = ranges.shape[0]
    slots = np.zeros((point_list.shape[0], N_SLOT))
    for tile in nb.prange(n_tiles):
        x0 = (tile % tiles_x) * TILE
        y0 = (tile // tiles_x) * TILE
        start = ranges[tile, 0]
        for py in range(y0, min(y0 + TILE, height)):
            for px in range(x0, min(x0 + TILE, width)):
                gr0 = g_rgb[py, px, 0]
                gr1 = g_rgb[py, px, 1]
                gr2 = g_rgb[py, px, 2]
                gd = g_depth[py, px]
                ga = g_alpha[py, px]
                if gr0 == 0.0 and gr1 == 0.0 and gr2 == 0.0 and gd == 0.0 and ga == 0.0:
                    continue
                T = t_final[py, px]
                s0 = bg[0]
                s1 = bg[1]
                s2 = bg[2]
                sd = 0.0
                sa = 0.0
                for k in range(start + n_contrib[py, px] - 1, start - 1, -1):
                    g = point_list[k]
                    dx = px - mu2d[g, 0]
                    dy = py - mu2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if power > 0.0:
                        continue
                    G = np.exp(power)
                    alpha = opac[g] * G
                    if alpha < ALPHA_MIN:
                        continue
                    clamped = alpha > ALPHA_MAX
                    if clamped:
                        alpha = ALPHA_MAX
                    T = T / (1.0 - alpha)
                    w = alpha * T
                    slots[k, 6] += w * gr0
                    slots[k, 7] += w * gr1
                    slots[k, 8] += w * gr2
                    slots[k, 9] += w * gd
                    dl_da = T * (gr0 * (color[g, 0] - s0) + gr1 * (color[g, 1] - s1)
                                 + gr2 * (color[g, 2] - s2) + gd * (depth[g] - sd) + ga * (1.0 - sa))
                    s0 = alpha * color[g, 0] + (1.0 - alpha) * s0
                    s1 = alpha * color[g, 1] + (1.0 - alpha) * s1
                    s2 = alpha * color[g, 2] + (1.0 - alpha) * s2
                    sd = alpha * depth[g] + (1.0 - alpha) * sd
                    sa = alpha + (1.0 - alpha) * sa
                    if clamped:
                        continue
                    slots[k, 5] += dl_da * G
                    dl_dp = dl_da * alpha
                    slots[k, 0] += dl_dp * (conic[g, 0] * dx + conic[g, 1] * dy)
                    slots[k, 1] += dl_dp * (conic[g, 1] * dx + conic[g, 2] * dy)
                    slots[k, 2] += dl_dp * (-0.5 * dx * dx)
                    slots[k, 3] += dl_dp * (-dx * dy)
                    slots[k, 4] += dl_dp * (-0.5 * dy * dy)
    return slots
