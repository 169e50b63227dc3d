"""Pure-numpy erf-based gelu (fallback for the fused numba kernels)."""

from __future__ import annotations

import numpy as np
from scipy.special import erf

INV_SQRT2 = 1.0 / np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu_value(x):
    return x * 0.5 * (1.0 + erf(x * INV_SQRT2))


def gelu_value_and_derivative(x):
    cdf = 0.5 * (1.0 + erf(x * INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * INV_SQRT_2PI
    return x * cdf, cdf + x * pdf


def layer_norm_forward(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, xhat, inv[..., 0]


def layer_norm_backward_x(g, xhat, inv, gamma):
    gg = g * gamma
    t1 = gg.mean(axis=-1, keepdims=True)
    t2 = (gg * xhat).mean(axis=-1, keepdims=True)
    return (gg - t1 - xhat * t2) * inv[..., None]
