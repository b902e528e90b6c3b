"""Gradient-quality metrics and spatial autocorrelation of gradient fields."""

import numpy as np


def cosine_similarity(a, b):
    a = np.ravel(a)
    b = np.ravel(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return float("nan")
    return float(np.dot(a, b) / (na * nb))


def normalized_mse(estimate, truth):
    """Mean squared difference of the two vectors after l2 normalisation."""
    a = np.ravel(estimate)
    b = np.ravel(truth)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return float("nan")
    return float(np.mean((a / na - b / nb) ** 2))


def _overlap(n, d):
    """Slices (left, right) with left[i] paired to right[i] = left[i] + d."""
    if d >= 0:
        return slice(0, n - d), slice(d, n)
    return slice(-d, n), slice(0, n + d)


def lag_products(gradients, window, mode="valid"):
    """Per-image sums of g(p) g(p + o) over pixels, shape (n, c, W, W), plus sums of g^2 (n, c).

    ``mode="valid"`` only pairs pixels that are both inside the image;
    ``mode="circular"`` wraps around the borders.
    """
    g = np.asarray(gradients, dtype=np.float64)
    if g.ndim == 3:
        g = g[None]
    n, c, h, w = g.shape
    if window % 2 != 1 or window > min(h, w):
        raise ValueError(f"window must be odd and at most {min(h, w)}, got {window}")
    if mode not in ("valid", "circular"):
        raise ValueError(f"unknown mode {mode!r}")
    half = window // 2
    out = np.empty((n, c, window, window))
    for i, dy in enumerate(range(-half, half + 1)):
        for j, dx in enumerate(range(-half, half + 1)):
            if mode == "circular":
                shifted = np.roll(g, (-dy, -dx), axis=(2, 3))
                out[:, :, i, j] = np.sum(g * shifted, axis=(2, 3))
            else:
                ya, yb = _overlap(h, dy)
                xa, xb = _overlap(w, dx)
                out[:, :, i, j] = np.sum(g[:, :, ya, xa] * g[:, :, yb, xb], axis=(2, 3))
    return out, np.sum(g**2, axis=(2, 3))


def autocorrelation(gradients, window=9, mode="valid"):
    """Pooled normalised autocorrelation r(o), one W x W map per channel.

    ``r(o) = sum_images sum_p g(p) g(p + o) / sum_images sum_p g(p)^2`` so the
    centre entry is exactly 1.
    """
    num, energy = lag_products(gradients, window, mode)
    den = energy.sum(axis=0)
    if np.any(den == 0):
        raise ValueError("autocorrelation undefined: a channel has all-zero gradients")
    r = num.sum(axis=0) / den[:, None, None]
    # Exact by definition; the summation order can otherwise leave an ulp of error.
    r[:, window // 2, window // 2] = 1.0
    return r


def autocorrelation_stderr(gradients, window=9, mode="valid"):
    """Standard error of the pooled ratio estimator (delta method over images)."""
    num, energy = lag_products(gradients, window, mode)
    n = len(num)
    r = num.sum(axis=0) / energy.sum(axis=0)[:, None, None]
    # Linearised per-image contributions of the ratio estimator.
    mean_energy = energy.mean(axis=0)[:, None, None]
    resid = (num - r[None] * energy[:, :, None, None]) / mean_energy
    se = resid.std(axis=0, ddof=1) / np.sqrt(n)
    se[:, window // 2, window // 2] = 0.0
    return se
