"""End-to-end training: SGD with momentum, cosine schedules, warm-up control
for distribution alignment, per-epoch metric logging, and checkpointing.

A run is strictly sequential and a pure function of (config, seed, dataset):
the same inputs reproduce the metrics CSV byte for byte. The alignment
vector is estimated exactly once, at the warm-up boundary, and frozen.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import evaluate, losses, model as M
from . import tensor as T
from .errors import ConfigError, TrainingDivergedError
from .losses import AlignmentVector, LossWeights

TAU_T_START = 0.07
TAU_T_END = 0.04
LR_MIN_RATIO = 1e-3

METRIC_COLUMNS = (
    "epoch",
    "lr",
    "tau_t",
    "loss_total",
    "loss_rep_u",
    "loss_rep_s",
    "loss_cls_u",
    "loss_cls_s",
    "adapter_sparsity",
    "feature_similarity",
    "acc_all",
    "acc_seen",
    "acc_novel",
    "predicted_seen_ratio",
)


@dataclass
class TrainConfig:
    lr0: float = 0.1
    epochs: int = 200
    batch_size: int = 128
    warmup_epochs: int = 30
    momentum: float = 0.9
    weight_decay: float = 5e-5
    seed: int = 0
    da_enabled: bool = True
    contrastive_mode: str = "standard"
    logit_da: bool = False
    checkpoint_every: int = 0  # 0: only the warm-up boundary and the final epoch
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.warmup_epochs > self.epochs:
            raise ConfigError(
                f"warmup_epochs {self.warmup_epochs} exceeds epochs {self.epochs}"
            )
        if self.contrastive_mode not in losses.CONTRASTIVE_MODES:
            raise ConfigError(f"bad contrastive_mode {self.contrastive_mode!r}")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)


@dataclass
class PretrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-5
    tau: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0 or self.epochs < 0:
            raise ConfigError("pretrain lr0 must be positive and epochs >= 0")


def cosine_lr(epoch, cfg):
    """Cosine decay from lr0 to lr0/1000 over the run."""
    lr_min = cfg.lr0 * LR_MIN_RATIO
    return lr_min + 0.5 * (cfg.lr0 - lr_min) * (1.0 + np.cos(np.pi * epoch / cfg.epochs))


def teacher_temp(epoch, cfg):
    """Teacher temperature annealed 0.07 -> 0.04 over the warm-up window."""
    w = cfg.warmup_epochs
    if w <= 0 or epoch >= w:
        return TAU_T_END
    return TAU_T_END + 0.5 * (TAU_T_START - TAU_T_END) * (1.0 + np.cos(np.pi * epoch / w))


class SgdMomentum:
    """Classical momentum with decoupled L2 on the given parameters."""

    def __init__(self, params):
        self.params = dict(sorted(params.items()))
        self.velocity = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, lr, momentum, weight_decay):
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            v = self.velocity[name]
            v *= momentum
            v += g
            p.data = p.data - lr * v - lr * weight_decay * p.data

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def sgd_step(params, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """One-shot functional form of the momentum update (tests use this)."""
    if velocity is None:
        velocity = {n: np.zeros_like(p.data) for n, p in params.items()}
    for name, p in sorted(params.items()):
        g = p.grad if p.grad is not None else 0.0
        v = velocity[name]
        v *= momentum
        v += g
        p.data = p.data - lr * v - lr * weight_decay * p.data
    return velocity


def _fmt(value):
    return repr(float(value))


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)

    def append(self, row):
        missing = set(METRIC_COLUMNS) - set(row)
        if missing:
            raise ConfigError(f"metrics row missing columns {sorted(missing)}")
        if not all(np.isfinite(float(row[c])) for c in METRIC_COLUMNS):
            raise TrainingDivergedError("non-finite metric value", epoch=row.get("epoch"))
        self.rows.append(row)

    def to_csv(self):
        lines = [",".join(METRIC_COLUMNS)]
        for row in self.rows:
            lines.append(
                ",".join(
                    str(int(row[c])) if c == "epoch" else _fmt(row[c]) for c in METRIC_COLUMNS
                )
            )
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    def column(self, name):
        return np.array([row[name] for row in self.rows])


@dataclass
class RunResult:
    metrics: RunMetrics
    alignment: AlignmentVector
    pi_estimations: int
    checkpoints: list


def _epoch_rng(seed, epoch, salt):
    return np.random.default_rng(np.random.SeedSequence([seed, salt, epoch]))


def train_run(model, dataset, split, cfg, aug=None, out_dir=None, run_tag="run"):
    """Adapter/head training on a frozen backbone; returns per-epoch metrics.

    The backbone must already be loaded and frozen; adapters are expected
    zero-initialized so epoch 0 starts from the pretrained features exactly.
    """
    aug = aug or D.AugmentConfig()
    w = cfg.weights
    num_classes = split.num_classes
    opt = SgdMomentum(model.trainable_params())
    metrics = RunMetrics()
    alignment = AlignmentVector.empty(num_classes)
    pi_base = np.full(num_classes, 1.0 / num_classes)
    pi_estimations = 0
    checkpoints = []

    frozen_before = model.frozen_fingerprint()
    h_pre = evaluate.extract_features(model, dataset.samples)
    written_epochs = set()

    def write_checkpoint(epoch):
        if out_dir is None or epoch in written_epochs:
            return
        written_epochs.add(epoch)
        path = os.path.join(out_dir, f"{run_tag}_epoch{epoch:04d}.ckpt")
        M.save_checkpoint(path, model.params, _model_configs(model), cfg.seed, epoch)
        checkpoints.append(path)

    for epoch in range(cfg.epochs):
        if cfg.da_enabled and epoch == cfg.warmup_epochs:
            pi_v = losses.estimate_pi_v(model, dataset.samples, w.tau_s)
            alignment = AlignmentVector(
                pi=losses.alignment_vector(pi_v, pi_base, w.s_d), frozen_at_epoch=epoch
            )
            pi_estimations += 1
            write_checkpoint(epoch)

        lr = cosine_lr(epoch, cfg)
        tau_t = teacher_temp(epoch, cfg)
        pi = alignment.pi if alignment.active else None

        dropout_rng = _epoch_rng(cfg.seed, epoch, 15485863)
        loss_sums = {"loss_total": 0.0, "loss_rep_u": 0.0, "loss_rep_s": 0.0,
                     "loss_cls_u": 0.0, "loss_cls_s": 0.0}
        sparsity_stats = []
        n_batches = 0
        batches = D.balanced_batches(
            split, dataset, cfg.batch_size, aug, np.random.SeedSequence([cfg.seed, 1299709, epoch])
        )
        for batch_idx, batch in enumerate(batches):
            opt.zero_grad()
            with T.Tape() as tape:
                breakdown = losses.total_loss(
                    model,
                    batch,
                    w,
                    tau_t,
                    pi=pi,
                    train=True,
                    rng=dropout_rng,
                    stats=sparsity_stats,
                    contrastive_mode=cfg.contrastive_mode,
                    logit_da=cfg.logit_da,
                )
                if not np.isfinite(breakdown.total.data):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {batch_idx}",
                        epoch=epoch,
                        batch=batch_idx,
                    )
                tape.backward(breakdown.total)
            opt.step(lr, cfg.momentum, cfg.weight_decay)
            for key, value in breakdown.as_dict().items():
                loss_sums[key] += value
            n_batches += 1

        # one feature pass over the whole dataset serves accuracy, bias, and drift
        h_now = evaluate.extract_features(model, dataset.samples)
        with T.no_tape():
            all_preds = np.argmax(
                model.class_probs(T.Tensor(h_now), w.tau_s).data, axis=1
            ).astype(np.int64)
        report = evaluate.gcd_accuracy(all_preds[split.unlabeled_ids], dataset.labels, split)
        seen_ratio = float(np.mean(np.isin(all_preds, split.seen_classes)))
        row = {c: loss_sums[c] / n_batches for c in loss_sums}
        row.update(
            epoch=epoch,
            lr=lr,
            tau_t=tau_t,
            adapter_sparsity=float(np.mean(sparsity_stats)) if sparsity_stats else 0.0,
            feature_similarity=evaluate.mean_cosine(h_pre, h_now),
            acc_all=report.acc_all,
            acc_seen=report.acc_seen,
            acc_novel=report.acc_novel,
            predicted_seen_ratio=seen_ratio,
        )
        metrics.append(row)
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            write_checkpoint(epoch + 1)

    if not cfg.checkpoint_every or cfg.epochs % cfg.checkpoint_every != 0:
        write_checkpoint(cfg.epochs)

    assert model.frozen_fingerprint() == frozen_before, "frozen parameters changed"
    return RunResult(
        metrics=metrics,
        alignment=alignment,
        pi_estimations=pi_estimations,
        checkpoints=checkpoints,
    )


def _model_configs(model):
    from dataclasses import asdict

    return {
        "backbone": asdict(model.bcfg),
        "adapter": asdict(model.acfg) if model.acfg is not None else None,
        "in_dim": model.in_dim,
        "num_classes": model.num_classes,
        "proj_dim": model.proj_dim,
    }


def pretrain_run(model, dataset, pcfg, aug=None):
    """Self-supervised contrastive pretraining of the trainable backbone.

    Iterates the whole dataset label-free; returns the per-epoch mean loss.
    Freezing happens when the caller rebuilds a GcdModel from this state.
    """
    aug = aug or D.AugmentConfig()
    opt = SgdMomentum(model.trainable_params())
    history = []
    n = len(dataset)
    lr_cfg = TrainConfig(
        lr0=pcfg.lr0, epochs=max(pcfg.epochs, 1), batch_size=pcfg.batch_size,
        warmup_epochs=0, seed=pcfg.seed,
    )
    for epoch in range(pcfg.epochs):
        rng = _epoch_rng(pcfg.seed, epoch, 32452843)
        order = rng.permutation(n)
        lr = cosine_lr(epoch, lr_cfg)
        total = 0.0
        count = 0
        for start in range(0, n, pcfg.batch_size):
            ids = order[start : start + pcfg.batch_size]
            if len(ids) < 2:
                continue
            x1, x2 = D.two_views_batch(dataset.samples[ids], aug, rng)
            opt.zero_grad()
            with T.Tape() as tape:
                z1 = model.project(model.features(x1, train=True, rng=rng))
                z2 = model.project(model.features(x2, train=True, rng=rng))
                loss = losses.self_sup_contrastive(z1, z2, pcfg.tau)
                if not np.isfinite(loss.data):
                    raise TrainingDivergedError(
                        f"non-finite pretrain loss at epoch {epoch}", epoch=epoch
                    )
                tape.backward(loss)
            opt.step(lr, pcfg.momentum, pcfg.weight_decay)
            total += float(loss.data)
            count += 1
        history.append(total / max(count, 1))
    return history
