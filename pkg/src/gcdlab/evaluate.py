"""Clustering-accuracy protocols, the k-means baseline, and bias/similarity
analysis metrics.

The three-way protocol is deliberately asymmetric: seen-category accuracy is
plain classification (prototype indices of seen classes are pinned by
supervision), while novel and overall accuracy run optimal assignment on the
full contingency matrix. Any relabeling of predicted clusters therefore
leaves overall accuracy unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ConfigError, ProtocolError
from .tensor import Tensor


@dataclass
class AssignmentResult:
    mapping: dict  # row index -> column index, injective over min(R, C) pairs
    total: float
    score: np.ndarray


@dataclass
class EvalReport:
    acc_all: float
    acc_seen: float
    acc_novel: float
    predicted_seen_ratio: float
    contingency: np.ndarray  # [true class, predicted class]

    def as_dict(self):
        return {
            "acc_all": self.acc_all,
            "acc_seen": self.acc_seen,
            "acc_novel": self.acc_novel,
            "predicted_seen_ratio": self.predicted_seen_ratio,
            "contingency": self.contingency.tolist(),
        }

    def as_text(self):
        lines = ["metric                  value", "-" * 30]
        for name in ("acc_all", "acc_seen", "acc_novel", "predicted_seen_ratio"):
            lines.append(f"{name:<22s} {getattr(self, name):8.4f}")
        return "\n".join(lines) + "\n"


def hungarian(score, backend=None):
    """Maximum-total-score assignment over min(R, C) pairs of a score matrix."""
    rows, cols, total = kernels.max_assignment(score, backend=backend)
    mapping = {int(r): int(c) for r, c in zip(rows, cols)}
    return AssignmentResult(mapping=mapping, total=total, score=np.asarray(score, dtype=np.float64))


def _matched_count(contingency):
    return hungarian(contingency).total


def gcd_accuracy(pred, truth, split):
    """Three-way accuracy over the unlabeled set.

    ``pred`` is aligned with ``split.unlabeled_ids``; ``truth`` is the full
    per-id ground-truth array (evaluation only).
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    ids = split.unlabeled_ids
    if pred.shape != ids.shape:
        raise ProtocolError(
            f"predictions must cover the unlabeled set exactly: {pred.shape} vs {ids.shape}"
        )
    k = split.num_classes
    if pred.size and (pred.min() < 0 or pred.max() >= k):
        raise ProtocolError(f"predicted labels outside [0, {k})")
    true_u = truth[ids]

    seen_mask = np.isin(true_u, split.seen_classes)
    acc_seen = float(np.mean(pred[seen_mask] == true_u[seen_mask])) if seen_mask.any() else 0.0

    contingency = np.zeros((k, k), dtype=np.float64)
    np.add.at(contingency, (true_u, pred), 1.0)
    acc_all = _matched_count(contingency) / len(ids)

    novel_mask = ~seen_mask
    if novel_mask.any():
        cont_novel = np.zeros((k, k), dtype=np.float64)
        np.add.at(cont_novel, (true_u[novel_mask], pred[novel_mask]), 1.0)
        acc_novel = _matched_count(cont_novel) / int(novel_mask.sum())
    else:
        acc_novel = 0.0

    ratio = float(np.mean(np.isin(pred, split.seen_classes)))
    return EvalReport(
        acc_all=float(acc_all),
        acc_seen=acc_seen,
        acc_novel=float(acc_novel),
        predicted_seen_ratio=ratio,
        contingency=contingency,
    )


def kmeans(features, k, seed, max_iter=300, tol=1e-6, backend=None):
    """Seeded k-means++ with Lloyd iterations; empty clusters re-seed from the
    point farthest from its assigned centroid."""
    x = np.ascontiguousarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < k:
        raise ConfigError(f"k-means needs at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        mass = closest.sum()
        if mass > 0:
            idx = rng.choice(n, p=closest / mass)
        else:
            idx = rng.integers(n)
        centroids[j] = x[idx]
        closest = np.minimum(closest, ((x - centroids[j]) ** 2).sum(axis=1))

    labels = None
    for _ in range(max_iter):
        labels, _ = kernels.kmeans_assign(x, centroids, backend=backend)
        updated, counts = kernels.kmeans_update(x, labels, k, backend=backend)
        empty = np.nonzero(counts == 0)[0]
        if empty.size:
            dist = ((x - updated[labels]) ** 2).sum(axis=1)
            for c in empty:
                far = int(np.argmax(dist))
                updated[c] = x[far]
                dist[far] = 0.0
        movement = float(np.sqrt(((updated - centroids) ** 2).sum(axis=1)).max())
        centroids = updated
        if movement < tol:
            break
    labels, _ = kernels.kmeans_assign(x, centroids, backend=backend)
    return labels


def predict(model, samples, tau, batch_size=1024):
    """Argmax prototype predictions over raw samples, no tape."""
    out = []
    with T.no_tape():
        for start in range(0, len(samples), batch_size):
            probs = model.class_probs(Tensor(samples[start : start + batch_size]), tau).data
            out.append(np.argmax(probs, axis=1))
    return np.concatenate(out).astype(np.int64)


def extract_features(model, samples, batch_size=1024):
    out = []
    with T.no_tape():
        for start in range(0, len(samples), batch_size):
            out.append(model.features(Tensor(samples[start : start + batch_size])).data)
    return np.concatenate(out)


def mean_cosine(a, b):
    na = a / np.linalg.norm(a, axis=1, keepdims=True)
    nb = b / np.linalg.norm(b, axis=1, keepdims=True)
    return float(np.mean((na * nb).sum(axis=1)))


def feature_similarity(model_pre, model_post, samples, batch_size=1024):
    """Mean cosine between the two models' class-token features."""
    h_pre = extract_features(model_pre, samples, batch_size)
    h_post = extract_features(model_post, samples, batch_size)
    return mean_cosine(h_pre, h_post)


@dataclass
class BiasReport:
    predicted_seen_ratio: float
    class_mass: np.ndarray  # predicted mass per class, seen classes first
    class_order: np.ndarray


def bias_report(model, samples, split, tau, batch_size=1024):
    """Argmax-classify the whole dataset; how much lands in the seen classes."""
    pred = predict(model, samples, tau, batch_size)
    ratio = float(np.mean(np.isin(pred, split.seen_classes)))
    counts = np.bincount(pred, minlength=split.num_classes).astype(np.float64)
    order = np.concatenate([split.seen_classes, split.novel_classes])
    mass = counts[order] / len(samples)
    return BiasReport(predicted_seen_ratio=ratio, class_mass=mass, class_order=order)
