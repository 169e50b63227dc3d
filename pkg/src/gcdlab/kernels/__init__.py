"""Loop-heavy numeric kernels with numba-compiled and pure-numpy backends.

The assignment solver and the k-means inner loops are the only places where
plain numpy either can't vectorize (augmenting-path search) or wastes memory
(N x K x d distance tensors), so those carry ``@njit`` versions. Everything
else in the package stays BLAS-backed numpy.

Backend selection: the ``GCDLAB_NUMBA`` environment variable ("0", "off",
"false", "no" disable) picks the default at import time; numba missing folds
back to numpy automatically. Every public function also takes an explicit
``backend=`` override, which is what ``benchmarks/bench_kernels.py`` uses to
time the two side by side. The two hungarian backends are written to perform
the identical arithmetic in the identical order, so their outputs match
bit-for-bit; the k-means backends agree up to summation order.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import ConfigError, DegenerateInputError, NumericError
from . import assignment, clustering, elementwise

_FALSEY = {"0", "off", "false", "no"}


def _env_wants_numba():
    return os.environ.get("GCDLAB_NUMBA", "1").strip().lower() not in _FALSEY


try:
    import numba  # noqa: F401

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - mirror env has numba
    _HAVE_NUMBA = False

NUMBA_ENABLED = _HAVE_NUMBA and _env_wants_numba()

if _HAVE_NUMBA:
    from . import _numba_impl

AVAILABLE_BACKENDS = ("numpy", "numba") if _HAVE_NUMBA else ("numpy",)


def backend_name():
    return "numba" if NUMBA_ENABLED else "numpy"


def _resolve(backend):
    if backend is None:
        backend = backend_name()
    if backend not in AVAILABLE_BACKENDS:
        raise ConfigError(f"unknown kernel backend {backend!r}; have {AVAILABLE_BACKENDS}")
    return backend


def max_assignment(score, backend=None):
    """Maximum-total-score one-to-one assignment over min(R, C) pairs.

    Returns (rows, cols, total): matched row indices in ascending order,
    their matched columns, and the summed score.
    """
    score = np.ascontiguousarray(score, dtype=np.float64)
    if score.ndim != 2 or score.size == 0:
        raise DegenerateInputError(f"assignment needs a non-empty 2-D matrix, got {score.shape}")
    if not np.all(np.isfinite(score)):
        raise NumericError("assignment scores must be finite")
    r, c = score.shape
    n = max(r, c)
    cost = np.zeros((n, n), dtype=np.float64)
    cost[:r, :c] = -score

    if _resolve(backend) == "numba":
        col_to_row = _numba_impl.min_cost_square(cost)
    else:
        col_to_row = assignment.min_cost_square(cost)

    rows, cols = [], []
    for j in range(c):
        i = int(col_to_row[j])
        if i < r:
            rows.append(i)
            cols.append(j)
    order = np.argsort(np.asarray(rows, dtype=np.int64), kind="stable")
    rows = np.asarray(rows, dtype=np.int64)[order]
    cols = np.asarray(cols, dtype=np.int64)[order]
    total = float(score[rows, cols].sum())
    return rows, cols, total


def kmeans_assign(points, centroids, backend=None):
    """Nearest-centroid labels and total within-cluster squared error."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    if _resolve(backend) == "numba":
        return _numba_impl.kmeans_assign(points, centroids)
    return clustering.kmeans_assign(points, centroids)


def kmeans_update(points, labels, k, backend=None):
    """Cluster means and member counts; empty clusters keep zero rows."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if _resolve(backend) == "numba":
        return _numba_impl.kmeans_update(points, labels, k)
    return clustering.kmeans_update(points, labels, k)


def layer_norm_forward(x2d, gamma, beta, eps, backend=None):
    """Row-normalized output plus (xhat, inv-std) residuals for the backward."""
    if _resolve(backend) == "numba":
        return _numba_impl.layer_norm_forward(
            np.ascontiguousarray(x2d), gamma, beta, eps
        )
    return elementwise.layer_norm_forward(x2d, gamma, beta, eps)


def layer_norm_backward_x(g2d, xhat, inv, gamma, backend=None):
    if _resolve(backend) == "numba":
        return _numba_impl.layer_norm_backward_x(
            np.ascontiguousarray(g2d), xhat, inv, gamma
        )
    return elementwise.layer_norm_backward_x(g2d, xhat, inv, gamma)


def gelu_value(x, backend=None):
    """erf-form gelu forward values."""
    x = np.asarray(x, dtype=np.float64)
    if _resolve(backend) == "numba":
        flat = np.ascontiguousarray(x).reshape(-1)
        return _numba_impl.gelu_value(flat).reshape(x.shape)
    return elementwise.gelu_value(x)


def gelu_value_and_derivative(x, backend=None):
    """erf-form gelu forward values and exact derivative, fused."""
    x = np.asarray(x, dtype=np.float64)
    if _resolve(backend) == "numba":
        flat = np.ascontiguousarray(x).reshape(-1)
        val, der = _numba_impl.gelu_value_and_derivative(flat)
        return val.reshape(x.shape), der.reshape(x.shape)
    val, der = elementwise.gelu_value_and_derivative(x)
    return val, der
