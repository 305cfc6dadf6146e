"""Pure numpy implementation of the fused MMD kernel (fallback backend)."""

import numpy as np


def _sqdist(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _mixture(d, coefs):
    k = np.zeros_like(d)
    w = np.zeros_like(d)
    for c in coefs:
        e = np.exp(-c * d)
        k += e
        w += c * e
    return k, w


def mmd_value_grad(x, y, coefs, need_grad=True):
    """Biased squared MMD under ``sum_s exp(-coefs[s] * ||a - b||^2)``.

    ``x`` (n, d) and ``y`` (m, d) must be float64 and C-contiguous. Returns
    ``(value, grad_x, grad_y)``; the gradients are ``None`` when not needed.
    """
    n, m = x.shape[0], y.shape[0]
    coefs = np.asarray(coefs, dtype=np.float64)
    kxx, wxx = _mixture(_sqdist(x, x), coefs)
    kyy, wyy = _mixture(_sqdist(y, y), coefs)
    kxy, wxy = _mixture(_sqdist(x, y), coefs)
    value = kxx.sum() / (n * n) + kyy.sum() / (m * m) - 2.0 * kxy.sum() / (n * m)
    if not need_grad:
        return float(value), None, None
    gx = -(4.0 / (n * n)) * (wxx.sum(axis=1)[:, None] * x - wxx @ x)
    gx += (4.0 / (n * m)) * (wxy.sum(axis=1)[:, None] * x - wxy @ y)
    gy = -(4.0 / (m * m)) * (wyy.sum(axis=1)[:, None] * y - wyy @ y)
    gy += (4.0 / (n * m)) * (wxy.sum(axis=0)[:, None] * y - wxy.T @ x)
    return float(value), gx, gy


def pairwise_sqdist(x):
    """Condensed upper-triangle squared distances of the rows of ``x``."""
    d = _sqdist(x, x)
    iu = np.triu_indices(x.shape[0], k=1)
    return d[iu]
