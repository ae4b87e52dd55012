"""Single-pass numba loops behind the memory-bound tensor ops.

All loops run sequentially in a fixed order, so results are bit-reproducible.
Per-channel reductions accumulate in float64.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def maxpool_forward(x, k):
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    idx = np.empty((n, c, ho, wo), dtype=np.uint8)
    for a in range(n):
        for b in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[a, b, i * k, j * k]
                    arg = 0
                    for di in range(k):
                        for dj in range(k):
                            v = x[a, b, i * k + di, j * k + dj]
                            # strict > keeps the first maximum in row-major order
                            if v > best:
                                best = v
                                arg = di * k + dj
                    out[a, b, i, j] = best
                    idx[a, b, i, j] = arg
    return out, idx


@numba.njit(cache=True)
def maxpool_backward(g, idx, k, h, w):
    n, c, ho, wo = g.shape
    gx = np.zeros((n, c, h, w), dtype=g.dtype)
    for a in range(n):
        for b in range(c):
            for i in range(ho):
                for j in range(wo):
                    arg = idx[a, b, i, j]
                    gx[a, b, i * k + arg // k, j * k + arg % k] = g[a, b, i, j]
    return gx


@numba.njit(cache=True)
def channel_mean_var(x):
    """Per-channel mean and biased variance over (N, H, W), two-pass."""
    n, c, h, w = x.shape
    m = n * h * w
    mean = np.zeros(c, dtype=np.float64)
    var = np.zeros(c, dtype=np.float64)
    for b in range(c):
        s = 0.0
        for a in range(n):
            for i in range(h):
                for j in range(w):
                    s += x[a, b, i, j]
        mu = s / m
        ss = 0.0
        for a in range(n):
            for i in range(h):
                for j in range(w):
                    d = x[a, b, i, j] - mu
                    ss += d * d
        mean[b] = mu
        var[b] = ss / m
    return mean, var


@numba.njit(cache=True)
def bn_normalize(x, mean, invstd, gamma, beta):
    n, c, h, w = x.shape
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    for a in range(n):
        for b in range(c):
            mu, s, gm, bt = mean[b], invstd[b], gamma[b], beta[b]
            for i in range(h):
                for j in range(w):
                    v = (x[a, b, i, j] - mu) * s
                    xhat[a, b, i, j] = v
                    out[a, b, i, j] = v * gm + bt
    return xhat, out


@numba.njit(cache=True)
def bn_grad_sums(g, xhat):
    """Per-channel sum(g) and sum(g * xhat)."""
    n, c, h, w = g.shape
    sg = np.zeros(c, dtype=np.float64)
    sgx = np.zeros(c, dtype=np.float64)
    for a in range(n):
        for b in range(c):
            s1 = 0.0
            s2 = 0.0
            for i in range(h):
                for j in range(w):
                    gv = np.float64(g[a, b, i, j])
                    s1 += gv
                    s2 += gv * xhat[a, b, i, j]
            sg[b] += s1
            sgx[b] += s2
    return sg, sgx


@numba.njit(cache=True)
def bn_input_grad(g, xhat, scale, mean_g, mean_gx):
    n, c, h, w = g.shape
    gx = np.empty_like(g)
    for a in range(n):
        for b in range(c):
            s, mg, mgx = scale[b], mean_g[b], mean_gx[b]
            for i in range(h):
                for j in range(w):
                    gx[a, b, i, j] = (g[a, b, i, j] - mg - xhat[a, b, i, j] * mgx) * s
    return gx


@numba.njit(cache=True)
def relu_backward(g, y):
    flat_g = g.reshape(-1)
    flat_y = y.reshape(-1)
    gx = np.empty_like(flat_g)
    for i in range(flat_g.size):
        gx[i] = flat_g[i] if flat_y[i] > 0 else 0.0
    return gx.reshape(g.shape)
