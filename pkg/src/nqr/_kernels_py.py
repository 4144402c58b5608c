"""Numpy implementations of the hot kernels.

These are the reference semantics; ``_kernels.pyx`` must agree with them
to floating-point round-off.
"""

import numpy as np


def bilinear_sample(img, xs, ys):
    """Sample ``img`` at continuous coordinates with edge clamping.

    Pixel ``(r, c)`` covers ``[c, c+1) x [r, r+1)``; its center is at
    ``(c + 0.5, r + 0.5)``.  ``xs``/``ys`` are 1-D float64 arrays.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    fx = np.clip(np.asarray(xs, dtype=np.float64) - 0.5, 0.0, w - 1.0)
    fy = np.clip(np.asarray(ys, dtype=np.float64) - 0.5, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(fx).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(fy).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = fx - x0
    wy = fy - y0
    top = img[y0, x0] * (1.0 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1.0 - wx) + img[y1, x1] * wx
    return top * (1.0 - wy) + bot * wy


def mog_update(means, variances, weights, frame, lr, threshold, bg_cutoff,
               var_init, var_floor):
    """One in-place mixture-of-Gaussians step over flattened pixels.

    ``means``, ``variances`` and ``weights`` have shape ``(K, N)``; ``frame``
    has shape ``(N,)``.  Returns a uint8 foreground mask of shape ``(N,)``.
    """
    K, N = means.shape
    cols = np.arange(N)
    sigma = np.sqrt(variances)
    score = np.where(weights > 0, weights / sigma, -1.0)
    order = np.argsort(-score, axis=0, kind="stable")

    w_sorted = np.take_along_axis(weights, order, axis=0)
    mu_sorted = np.take_along_axis(means, order, axis=0)
    sd_sorted = np.take_along_axis(sigma, order, axis=0)

    running = np.zeros(N)
    is_bg = np.empty((K, N), dtype=bool)
    for r in range(K):
        is_bg[r] = running < bg_cutoff
        running = running + w_sorted[r]

    ok = (w_sorted > 0) & (np.abs(frame - mu_sorted) < threshold * sd_sorted)
    matched = ok.any(axis=0)
    match_rank = np.argmax(ok, axis=0)
    fg = ~matched | ~is_bg[match_rank, cols]

    weights *= 1.0 - lr

    c = cols[matched]
    k = order[match_rank[matched], c]
    weights[k, c] += lr
    rho = np.minimum(1.0, lr / weights[k, c])
    d = frame[c] - means[k, c]
    means[k, c] += rho * d
    variances[k, c] = np.maximum(var_floor, variances[k, c] + rho * (d * d - variances[k, c]))

    cu = cols[~matched]
    ku = order[K - 1, cu]
    means[ku, cu] = frame[cu]
    variances[ku, cu] = var_init
    weights[ku, cu] = lr

    total = weights[0].copy()
    for r in range(1, K):
        total += weights[r]
    weights /= total
    return fg.astype(np.uint8)
