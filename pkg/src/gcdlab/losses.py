"""Training objectives: contrastive representation learning, self-distillation
classification with mean-entropy regularization, and distribution alignment.

Probability-space conventions: every log is clamped at 1e-8 (the alignment
offset can push probabilities non-positive), teacher targets are plain
ndarrays so no gradient can flow through them, and the alignment offset is
added in probability space as a frozen log-ratio vector. A logit-space
variant (offset added before the student softmax) exists behind
``logit_da`` but is off by default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateInputError, NumericError
from .tensor import Tensor

PROB_EPS = 1e-8
MASK_VALUE = -1e30

CONTRASTIVE_MODES = ("standard", "as_written")


@dataclass
class LossWeights:
    lam_sup: float = 0.35
    lam_ent: float = 1.0
    tau_u: float = 1.0
    tau_c: float = 0.07
    tau_s: float = 0.1
    s_d: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.lam_sup <= 1.0:
            raise ConfigError(f"lam_sup must be in [0, 1], got {self.lam_sup}")
        for name in ("tau_u", "tau_c", "tau_s"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.s_d < 0:
            raise ConfigError(f"s_d must be >= 0, got {self.s_d}")


@dataclass
class AlignmentVector:
    pi: np.ndarray
    frozen_at_epoch: int = -1  # -1: not yet estimated (warm-up still running)

    @classmethod
    def empty(cls, num_classes):
        return cls(pi=np.zeros(num_classes), frozen_at_epoch=-1)

    @property
    def active(self):
        return self.frozen_at_epoch >= 0


def _as_probs(t, name):
    sums = t.data.sum(axis=-1)
    if np.max(np.abs(sums - 1.0)) > 1e-6:
        raise NumericError(f"{name} rows must sum to 1")


def self_sup_contrastive(z, z_other, tau_u, mode="standard"):
    """Cross-view InfoNCE: anchors from one view against candidates from the other.

    ``as_written`` drops the positive pair from the denominator (which lets
    the per-sample terms go negative); ``standard`` keeps it, which is the
    bounded form actually used for training.
    """
    if mode not in CONTRASTIVE_MODES:
        raise ConfigError(f"contrastive mode must be one of {CONTRASTIVE_MODES}, got {mode!r}")
    b = z.shape[0]
    if b < 2:
        raise DegenerateInputError(f"contrastive batch needs >= 2 samples, got {b}")
    sims = T.scale(T.matmul(z, T.transpose(z_other)), 1.0 / tau_u)
    eye = np.eye(b)
    positives = T.tsum(T.mul(sims, Tensor(eye)), axis=1)
    if mode == "as_written":
        sims = T.add(sims, Tensor(eye * MASK_VALUE))
    return T.tmean(T.sub(T.logsumexp(sims), positives))


def sup_contrastive(z, labels, tau_c):
    """Label-matched contrastive loss; anchors without a positive are skipped."""
    labels = np.asarray(labels)
    m = z.shape[0]
    if m < 2:
        raise DegenerateInputError(f"supervised contrastive batch needs >= 2 samples, got {m}")
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    pos_counts = same.sum(axis=1)
    anchors = pos_counts > 0
    num_anchors = int(anchors.sum())
    if num_anchors == 0:
        raise DegenerateInputError("no anchor has a same-label positive")
    weights = np.zeros((m, m))
    weights[same] = 1.0
    weights[anchors] /= pos_counts[anchors, None]
    weights /= num_anchors
    row_weight = weights.sum(axis=1)

    sims = T.scale(T.matmul(z, T.transpose(z)), 1.0 / tau_c)
    masked = T.add(sims, Tensor(np.eye(m) * MASK_VALUE))
    log_denom = T.logsumexp(masked)
    return T.sub(
        T.tsum(T.mul(Tensor(row_weight), log_denom)),
        T.tsum(T.mul(Tensor(weights), sims)),
    )


def align_loss(q_teacher, p, pi=None):
    """Mean over rows of -sum_k q'_k log(p_k + pi_k), clamped inside the log.

    With pi None (or exactly zero) this IS the plain soft cross-entropy; the
    alignment path only shifts the probabilities before the clamp.
    """
    q = q_teacher.data if isinstance(q_teacher, Tensor) else np.asarray(q_teacher)
    b = p.shape[0]
    shifted = p if pi is None else T.add_bias(p, Tensor(np.asarray(pi, dtype=np.float64)))
    logp = T.log(T.clamp_min(shifted, PROB_EPS))
    return T.scale(T.tsum(T.mul(Tensor(q), logp)), -1.0 / b)


def cls_losses(p, p_other, q_teacher, labels_or_none, lam_ent, pi=None):
    """Supervised CE on labeled rows and teacher CE minus mean-entropy bonus.

    ``labels_or_none`` marks unlabeled rows with -1; ``q_teacher`` must come
    from the other view at the sharper teacher temperature, already detached.
    """
    _as_probs(p, "p")
    _as_probs(p_other, "p_other")
    q = q_teacher.data if isinstance(q_teacher, Tensor) else np.asarray(q_teacher)
    _as_probs(Tensor(q), "q_teacher")
    b, k = p.shape

    if labels_or_none is None:
        labeled = np.zeros(b, dtype=bool)
    else:
        labels = np.asarray(labels_or_none)
        labeled = labels >= 0
    if labeled.any():
        onehot = np.zeros((b, k))
        onehot[np.nonzero(labeled)[0], labels[labeled]] = 1.0
        logp = T.log(T.clamp_min(p, PROB_EPS))
        loss_sup = T.scale(T.tsum(T.mul(Tensor(onehot), logp)), -1.0 / int(labeled.sum()))
    else:
        loss_sup = Tensor(0.0)

    ce = align_loss(q, p, pi)
    p_bar = T.scale(T.add(T.tsum(p, axis=0), T.tsum(p_other, axis=0)), 1.0 / (2.0 * b))
    entropy = T.scale(T.tsum(T.mul(p_bar, T.log(T.clamp_min(p_bar, PROB_EPS)))), -1.0)
    loss_unsup = T.sub(ce, T.scale(entropy, lam_ent))
    return loss_sup, loss_unsup


def mean_entropy(p_bar):
    """H of a probability vector, the quantity maximized against collapse."""
    p_bar = np.asarray(p_bar)
    return float(-(p_bar * np.log(np.maximum(p_bar, PROB_EPS))).sum())


def estimate_pi_v(model, samples, tau_s, batch_size=1024):
    """Mean predicted class distribution over an unaugmented dataset pass."""
    n = len(samples)
    if n == 0:
        raise DegenerateInputError("estimate_pi_v over an empty dataset")
    total = None
    with T.no_tape():
        for start in range(0, n, batch_size):
            probs = model.class_probs(Tensor(samples[start : start + batch_size]), tau_s).data
            part = probs.sum(axis=0)
            total = part if total is None else total + part
    return total / total.sum()


def alignment_vector(pi_v, pi_b, s_d):
    """Frozen log-ratio offset log(pi_v / pi_b) * s_d."""
    pi_v = np.asarray(pi_v, dtype=np.float64)
    pi_b = np.asarray(pi_b, dtype=np.float64)
    if np.any(pi_b <= 0):
        raise ConfigError("base distribution must be strictly positive")
    return np.log(np.maximum(pi_v, PROB_EPS) / pi_b) * s_d


@dataclass
class LossBreakdown:
    total: Tensor
    rep_u: float
    rep_s: float
    cls_u: float
    cls_s: float

    def as_dict(self):
        return {
            "loss_total": float(self.total.data),
            "loss_rep_u": self.rep_u,
            "loss_rep_s": self.rep_s,
            "loss_cls_u": self.cls_u,
            "loss_cls_s": self.cls_s,
        }


def total_loss(
    model,
    batch,
    weights,
    tau_t,
    pi=None,
    train=True,
    rng=None,
    stats=None,
    contrastive_mode="standard",
    logit_da=False,
    teacher_override=None,
):
    """Full objective on a two-view batch, with its component breakdown.

    total = (1-lam) L_rep_u + lam L_rep_s + (1-lam) L_cls_u + lam L_cls_s,
    classification terms averaged over the two view-swap directions. ``pi``
    (when given) replaces the plain teacher CE by the alignment CE, or moves
    into the student logits when ``logit_da`` is set. ``teacher_override``
    pins the teacher targets, which the gradient checker needs to hold the
    stop-gradient path constant.
    """
    b = batch.view1.shape[0]
    both = np.concatenate([batch.view1, batch.view2], axis=0)
    h = model.features(both, train=train, rng=rng, stats=stats)
    z = model.project(h)
    z1 = T.slice_rows(z, 0, b)
    z2 = T.slice_rows(z, b, 2 * b)

    if teacher_override is not None:
        q1, q2 = teacher_override
    else:
        with T.no_tape():
            q = model.class_probs(Tensor(h.data), tau_t).data
        q1, q2 = q[:b], q[b:]

    offset = pi if (logit_da and pi is not None) else None
    p = model.class_probs(h, weights.tau_s, logit_offset=offset)
    p1 = T.slice_rows(p, 0, b)
    p2 = T.slice_rows(p, b, 2 * b)

    rep_u = self_sup_contrastive(z1, z2, weights.tau_u, mode=contrastive_mode)

    nl = batch.num_labeled
    rep_s = Tensor(0.0)
    if nl > 0:
        lab = np.asarray(batch.labels[:nl])
        # a batch can, in principle, land with all-distinct labels; the
        # supervised term is simply absent then rather than aborting the run
        if np.unique(lab).size < lab.size:
            z_lab = T.concat_rows(T.slice_rows(z1, 0, nl), T.slice_rows(z2, 0, nl))
            rep_s = sup_contrastive(z_lab, np.concatenate([lab, lab]), weights.tau_c)

    ce_pi = None if logit_da else pi
    s1, u1 = cls_losses(p1, p2, q2, batch.labels, weights.lam_ent, pi=ce_pi)
    s2, u2 = cls_losses(p2, p1, q1, batch.labels, weights.lam_ent, pi=ce_pi)
    cls_s = T.scale(T.add(s1, s2), 0.5)
    cls_u = T.scale(T.add(u1, u2), 0.5)

    lam = weights.lam_sup
    total = T.add(
        T.add(T.scale(rep_u, 1.0 - lam), T.scale(rep_s, lam)),
        T.add(T.scale(cls_u, 1.0 - lam), T.scale(cls_s, lam)),
    )
    return LossBreakdown(
        total=total,
        rep_u=float(rep_u.data),
        rep_s=float(rep_s.data),
        cls_u=float(cls_u.data),
        cls_s=float(cls_s.data),
    )
