"""Loop kernels compiled with numba; same contracts as ``_numpy``."""
import math

import numpy as np
from numba import njit

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@njit(cache=True)
def layer_norm_fwd(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += x[i, j]
        mean = s / d
        v = 0.0
        for j in range(d):
            c = x[i, j] - mean
            v += c * c
        r = 1.0 / math.sqrt(v / d + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mean) * r
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd


@njit(cache=True)
def layer_norm_bwd(g, xhat, rstd, gamma):
    n, d = g.shape
    dx = np.empty_like(g)
    dgamma = np.zeros(d)
    dbeta = np.zeros(d)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            dh = g[i, j] * gamma[j]
            m1 += dh
            m2 += dh * xhat[i, j]
            dgamma[j] += g[i, j] * xhat[i, j]
            dbeta[j] += g[i, j]
        m1 /= d
        m2 /= d
        r = rstd[i]
        for j in range(d):
            dx[i, j] = (g[i, j] * gamma[j] - m1 - xhat[i, j] * m2) * r
    return dx, dgamma, dbeta


@njit(cache=True)
def softmax_fwd(x):
    n, d = x.shape
    y = np.empty_like(x)
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, d):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(d):
            e = math.exp(x[i, j] - mx)
            y[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(d):
            y[i, j] *= inv
    return y


@njit(cache=True)
def softmax_bwd(g, y):
    n, d = g.shape
    dx = np.empty_like(g)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += g[i, j] * y[i, j]
        for j in range(d):
            dx[i, j] = y[i, j] * (g[i, j] - s)
    return dx


@njit(cache=True)
def gelu_fwd(x):
    n, d = x.shape
    y = np.empty_like(x)
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            y[i, j] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
    return y


@njit(cache=True)
def gelu_bwd(g, x):
    n, d = x.shape
    dx = np.empty_like(x)
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
            pdf = math.exp(-0.5 * v * v) * _INV_SQRT_2PI
            dx[i, j] = g[i, j] * (cdf + v * pdf)
    return dx
