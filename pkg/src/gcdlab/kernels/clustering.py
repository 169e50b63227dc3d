"""Pure-numpy k-means inner loops (vectorized fallback for the numba kernels)."""

from __future__ import annotations

import numpy as np


def kmeans_assign(points, centroids):
    """Nearest-centroid labels (first index wins ties) and summed squared error."""
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1).astype(np.int64)
    sse = float(d2[np.arange(points.shape[0]), labels].sum())
    return labels, sse


def kmeans_update(points, labels, k):
    """Mean of each cluster's members; empty clusters stay at zero."""
    sums = np.zeros((k, points.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, points)
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    nonzero = counts > 0
    sums[nonzero] /= counts[nonzero, None]
    return sums, counts
