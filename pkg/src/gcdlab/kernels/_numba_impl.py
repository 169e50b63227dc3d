"""Numba-compiled scalar-loop kernels. Import only when numba is present.

No fastmath: IEEE ordering must match the numpy backend so the assignment
solver stays bit-identical across backends.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@njit(cache=True)
def gelu_value(x):
    out = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        out[i] = v * 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
    return out


@njit(cache=True)
def gelu_value_and_derivative(x):
    val = np.empty_like(x)
    der = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        pdf = math.exp(-0.5 * v * v) * _INV_SQRT_2PI
        val[i] = v * cdf
        der[i] = cdf + v * pdf
    return val, der


@njit(cache=True)
def min_cost_square(cost):
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    out = np.empty(n, dtype=np.int64)
    for j in range(n):
        out[j] = p[j + 1] - 1
    return out


@njit(cache=True)
def layer_norm_forward(x, gamma, beta, eps):
    n, d = x.shape
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty(n)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            diff = x[i, j] - mu
            var += diff * diff
        var /= d
        s = 1.0 / math.sqrt(var + eps)
        inv[i] = s
        for j in range(d):
            h = (x[i, j] - mu) * s
            xhat[i, j] = h
            out[i, j] = h * gamma[j] + beta[j]
    return out, xhat, inv


@njit(cache=True)
def layer_norm_backward_x(g, xhat, inv, gamma):
    n, d = g.shape
    dx = np.empty_like(g)
    for i in range(n):
        t1 = 0.0
        t2 = 0.0
        for j in range(d):
            gg = g[i, j] * gamma[j]
            t1 += gg
            t2 += gg * xhat[i, j]
        t1 /= d
        t2 /= d
        s = inv[i]
        for j in range(d):
            dx[i, j] = (g[i, j] * gamma[j] - t1 - xhat[i, j] * t2) * s
    return dx


@njit(cache=True)
def kmeans_assign(points, centroids):
    n, d = points.shape
    k = centroids.shape[0]
    labels = np.empty(n, dtype=np.int64)
    sse = 0.0
    for i in range(n):
        best = 0
        best_d = np.inf
        for c in range(k):
            s = 0.0
            for j in range(d):
                diff = points[i, j] - centroids[c, j]
                s += diff * diff
            if s < best_d:
                best_d = s
                best = c
        labels[i] = best
        sse += best_d
    return labels, sse


@njit(cache=True)
def kmeans_update(points, labels, k):
    n, d = points.shape
    sums = np.zeros((k, d))
    counts = np.zeros(k, dtype=np.int64)
    for i in range(n):
        c = labels[i]
        counts[c] += 1
        for j in range(d):
            sums[c, j] += points[i, j]
    for c in range(k):
        if counts[c] > 0:
            for j in range(d):
                sums[c, j] /= counts[c]
    return sums, counts
