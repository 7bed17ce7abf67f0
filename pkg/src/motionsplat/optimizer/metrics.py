"""Image quality metrics. SSIM comes with an analytic gradient so it can be used as a loss."""

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 100.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    return g / g.sum()


def psnr(pred, target, peak=1.0):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse <= peak**2 * 10 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(peak**2 / mse))


def _filter_valid(x, g, r):
    y = correlate1d(x, g, axis=0, mode="constant")
    y = correlate1d(y, g, axis=1, mode="constant")
    return y[r:-r, r:-r] if r else y


def _filter_valid_adjoint(y, g, r, shape):
    # Zero-embed then correlate again: the kernel is symmetric.
    full = np.zeros(shape + y.shape[2:])
    if r:
        full[r:-r, r:-r] = y
    else:
        full[...] = y
    out = correlate1d(full, g, axis=0, mode="constant")
    return correlate1d(out, g, axis=1, mode="constant")


def ssim(pred, target, window=11, sigma=1.5, return_grad=False):
    """Mean SSIM over all fully-covered windows, averaged over channels.

    Returns ``value`` or ``(value, d value / d pred)``.
    """
    x = np.asarray(pred, dtype=float)
    y = np.asarray(target, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.shape[0] < window or x.shape[1] < window:
        raise ValueError(f"image smaller than the {window}x{window} SSIM window")
    g = gaussian_window(window, sigma)
    r = window // 2
    f = lambda z: _filter_valid(z, g, r)  # noqa: E731
    mx, my = f(x), f(y)
    sxx = f(x * x) - mx * mx
    syy = f(y * y) - my * my
    sxy = f(x * y) - mx * my
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * sxy + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = sxx + syy + SSIM_C2
    smap = (A1 * A2) / (B1 * B2)
    value = float(smap.mean())
    if not return_grad:
        return value
    n = smap.size
    # Partials of each window's SSIM with respect to the filtered statistics.
    d_mx = (2 * my * A2) / (B1 * B2) - smap * 2 * mx / B1
    d_sxx = -smap / B2
    d_sxy = 2 * A1 / (B1 * B2)
    # sxx = f(x^2) - mx^2 and sxy = f(xy) - mx my.
    d_mx_total = d_mx - 2 * mx * d_sxx - my * d_sxy
    adj = lambda z: _filter_valid_adjoint(z, g, r, x.shape[:2])  # noqa: E731
    grad = adj(d_mx_total) + 2 * x * adj(d_sxx) + y * adj(d_sxy)
    return value, grad / n
