"""Fused row-wise kernels for the message-passing hot loop."""

import numpy as np
from numba import njit


@njit(cache=True)
def leaky_back(grad, a, slope):
    out = np.empty_like(grad)
    n, d = grad.shape
    for i in range(n):
        for j in range(d):
            g = grad[i, j]
            out[i, j] = g if a[i, j] > 0 else slope * g
    return out


@njit(cache=True)
def ln_forward(r, g, b, eps):
    n, d = r.shape
    y = np.empty_like(r)
    xhat = np.empty_like(r)
    inv = np.empty((n, 1), dtype=r.dtype)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += r[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = r[i, j] - mu
            var += c * c
        var /= d
        s = 1.0 / np.sqrt(var + eps)
        inv[i, 0] = s
        for j in range(d):
            xh = (r[i, j] - mu) * s
            xhat[i, j] = xh
            y[i, j] = xh * g[j] + b[j]
    return y, xhat, inv


@njit(cache=True)
def ln_backward(dy, g, xhat, inv):
    n, d = dy.shape
    dr = np.empty_like(dy)
    dg = np.zeros(d, dtype=np.float64)
    db = np.zeros(d, dtype=np.float64)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            dx = dy[i, j] * g[j]
            m1 += dx
            m2 += dx * xhat[i, j]
            dg[j] += dy[i, j] * xhat[i, j]
            db[j] += dy[i, j]
        m1 /= d
        m2 /= d
        s = inv[i, 0]
        for j in range(d):
            dr[i, j] = s * (dy[i, j] * g[j] - m1 - xhat[i, j] * m2)
    return dr, dg, db


@njit(cache=True)
def softplus_1d(z):
    # scalar loop: vectorized exp/log1p round differently in the array tail
    out = np.empty_like(z)
    for i in range(z.shape[0]):
        t = np.log1p(np.exp(-abs(z[i])))
        out[i] = z[i] + t if z[i] > 0 else t
    return out


@njit(cache=True)
def row_dot(x, w):
    # x @ w for a single output column; BLAS gemv blocking makes rows depend on position
    n, d = x.shape
    out = np.empty(n, dtype=x.dtype)
    for i in range(n):
        acc = 0.0
        for j in range(d):
            acc += x[i, j] * w[j]
        out[i] = acc
    return out
