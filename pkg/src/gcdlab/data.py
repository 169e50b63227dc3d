"""Synthetic token-sequence datasets, category-discovery splits, two-view
augmentation, the balanced labeled/unlabeled sampler, and the dataset file.

Samples are token sequences rather than images: the method under study runs
entirely on transformer token features, so Gaussian class-prototype token
matrices plus noise exercise every code path while keeping a full run in
seconds. Views are made by additive jitter and per-token dropout (the class
token is added inside the model and is never dropped).

File format ``GCDSYN01``: 8-byte magic, little-endian u64 JSON header length,
JSON header (spec, split, class map, seed), then row-major little-endian
float64 payload of all samples in id order followed by the class prototypes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, FormatError, GenerationError


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    num_seen: int = 5
    samples_per_class: int = 100
    token_len: int = 8
    token_dim: int = 16
    class_separation: float = 4.0
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.num_seen < self.num_classes:
            raise ConfigError(
                f"need 0 < num_seen < num_classes, got {self.num_seen}/{self.num_classes}"
            )
        if self.samples_per_class < 1 or self.token_len < 1 or self.token_dim < 1:
            raise ConfigError("samples_per_class, token_len, token_dim must be >= 1")
        if self.class_separation < 0 or self.noise_sigma < 0:
            raise ConfigError("class_separation and noise_sigma must be >= 0")


@dataclass
class AugmentConfig:
    sigma: float = 0.5
    token_dropout: float = 0.15

    def __post_init__(self):
        if self.sigma < 0 or not 0.0 <= self.token_dropout <= 1.0:
            raise ConfigError("augmentation parameters out of range")


@dataclass
class Dataset:
    spec: SyntheticSpec
    samples: np.ndarray  # (N, token_len, token_dim)
    labels: np.ndarray  # (N,) ground truth, for evaluation only
    prototypes: np.ndarray  # (num_classes, token_len, token_dim)

    def __len__(self):
        return self.samples.shape[0]


@dataclass
class GcdSplit:
    labeled_ids: np.ndarray
    labeled_labels: np.ndarray
    unlabeled_ids: np.ndarray
    seen_classes: np.ndarray
    novel_classes: np.ndarray
    labeled_fraction: float
    seed: int

    @property
    def num_classes(self):
        return len(self.seen_classes) + len(self.novel_classes)

    def to_dict(self):
        return {
            "labeled_ids": self.labeled_ids.tolist(),
            "labeled_labels": self.labeled_labels.tolist(),
            "unlabeled_ids": self.unlabeled_ids.tolist(),
            "seen_classes": self.seen_classes.tolist(),
            "novel_classes": self.novel_classes.tolist(),
            "labeled_fraction": self.labeled_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            labeled_ids=np.asarray(d["labeled_ids"], dtype=np.int64),
            labeled_labels=np.asarray(d["labeled_labels"], dtype=np.int64),
            unlabeled_ids=np.asarray(d["unlabeled_ids"], dtype=np.int64),
            seen_classes=np.asarray(d["seen_classes"], dtype=np.int64),
            novel_classes=np.asarray(d["novel_classes"], dtype=np.int64),
            labeled_fraction=float(d["labeled_fraction"]),
            seed=int(d["seed"]),
        )


@dataclass
class Batch:
    ids: np.ndarray
    view1: np.ndarray
    view2: np.ndarray
    labels: np.ndarray  # -1 marks unlabeled rows; labeled rows come first
    num_labeled: int


def generate(spec):
    """Seeded class prototypes (pairwise separated) plus Gaussian samples."""
    rng = np.random.default_rng(spec.seed)
    shape = (spec.token_len, spec.token_dim)
    prototypes = np.empty((spec.num_classes,) + shape)
    for c in range(spec.num_classes):
        for attempt in range(1000):
            cand = rng.normal(size=shape)
            dists = [np.linalg.norm(cand - prototypes[j]) for j in range(c)]
            if not dists or min(dists) >= spec.class_separation:
                prototypes[c] = cand
                break
        else:
            raise GenerationError(
                f"could not place class {c} at separation {spec.class_separation} "
                f"in {spec.token_len}x{spec.token_dim} after 1000 rejection rounds"
            )
    n = spec.num_classes * spec.samples_per_class
    samples = np.empty((n,) + shape)
    labels = np.empty(n, dtype=np.int64)
    for c in range(spec.num_classes):
        lo = c * spec.samples_per_class
        hi = lo + spec.samples_per_class
        noise = rng.normal(size=(spec.samples_per_class,) + shape) * spec.noise_sigma
        samples[lo:hi] = prototypes[c] + noise
        labels[lo:hi] = c
    return Dataset(spec=spec, samples=samples, labels=labels, prototypes=prototypes)


def make_split(dataset, num_seen, labeled_fraction, seed=0):
    """Seen classes from a seeded class shuffle; a fraction of each seen
    class's samples becomes the labeled pool, everything else is unlabeled."""
    k = dataset.spec.num_classes
    if num_seen >= k or num_seen < 1:
        raise ConfigError(f"num_seen must be in [1, {k - 1}], got {num_seen}")
    if not 0.0 < labeled_fraction < 1.0:
        raise ConfigError(f"labeled_fraction must be in (0, 1), got {labeled_fraction}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(k)
    seen = np.sort(order[:num_seen])
    novel = np.sort(order[num_seen:])

    labeled = []
    for c in seen:
        ids = np.nonzero(dataset.labels == c)[0]
        take = int(round(len(ids) * labeled_fraction))
        picked = rng.permutation(ids)[:take]
        labeled.append(picked)
    labeled_ids = np.sort(np.concatenate(labeled))
    mask = np.ones(len(dataset), dtype=bool)
    mask[labeled_ids] = False
    unlabeled_ids = np.nonzero(mask)[0]
    return GcdSplit(
        labeled_ids=labeled_ids,
        labeled_labels=dataset.labels[labeled_ids].copy(),
        unlabeled_ids=unlabeled_ids,
        seen_classes=seen,
        novel_classes=novel,
        labeled_fraction=labeled_fraction,
        seed=seed,
    )


def two_views(sample, aug, seed):
    """Two independent jitter+token-dropout draws of one sample."""
    rng = np.random.default_rng(seed)
    batch = sample[None, ...]
    x1, x2 = two_views_batch(batch, aug, rng)
    return x1[0], x2[0]


def two_views_batch(samples, aug, rng):
    views = []
    for _ in range(2):
        v = samples + rng.normal(size=samples.shape) * aug.sigma
        if aug.token_dropout > 0.0:
            keep = rng.random(samples.shape[:2]) >= aug.token_dropout
            v = v * keep[:, :, None]
        views.append(v)
    return views[0], views[1]


def _epoch_sequence(rng, pool, needed):
    """A seeded permutation, extended by resampling with replacement."""
    seq = rng.permutation(pool)
    if needed > len(seq):
        extra = rng.choice(pool, size=needed - len(seq), replace=True)
        seq = np.concatenate([seq, extra])
    return seq[:needed]


def balanced_batches(split, dataset, batch_size, aug, seed):
    """One epoch of batches holding exactly B/2 labeled and B/2 unlabeled samples.

    The epoch covers the larger pool once (plus tail padding); the smaller
    pool is resampled with replacement up to the same length, which is the
    labeled-oversampling behaviour the classifier bias analysis refers to.
    """
    if batch_size % 2 != 0 or batch_size < 2:
        raise ConfigError(f"batch size must be even and >= 2, got {batch_size}")
    if len(split.labeled_ids) == 0 or len(split.unlabeled_ids) == 0:
        raise ConfigError("both the labeled and unlabeled pools must be non-empty")
    half = batch_size // 2
    label_of = {int(i): int(l) for i, l in zip(split.labeled_ids, split.labeled_labels)}
    num_batches = int(np.ceil(max(len(split.labeled_ids), len(split.unlabeled_ids)) / half))
    needed = num_batches * half
    rng = np.random.default_rng(seed)
    seq_l = _epoch_sequence(rng, split.labeled_ids, needed)
    seq_u = _epoch_sequence(rng, split.unlabeled_ids, needed)

    def batches():
        for b in range(num_batches):
            ids_l = seq_l[b * half : (b + 1) * half]
            ids_u = seq_u[b * half : (b + 1) * half]
            ids = np.concatenate([ids_l, ids_u])
            labels = np.array([label_of[int(i)] for i in ids_l] + [-1] * half, dtype=np.int64)
            x1, x2 = two_views_batch(dataset.samples[ids], aug, rng)
            yield Batch(ids=ids, view1=x1, view2=x2, labels=labels, num_labeled=half)

    return batches()


def num_batches_per_epoch(split, batch_size):
    half = batch_size // 2
    return int(np.ceil(max(len(split.labeled_ids), len(split.unlabeled_ids)) / half))


# ---------------------------------------------------------------------------
# dataset file

DATASET_MAGIC = b"GCDSYN01"


def save_dataset(path, dataset, split=None):
    header = {
        "spec": asdict(dataset.spec),
        "seed": dataset.spec.seed,
        "class_map": dataset.labels.tolist(),
        "split": split.to_dict() if split is not None else None,
        "shapes": {
            "samples": list(dataset.samples.shape),
            "prototypes": list(dataset.prototypes.shape),
        },
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(dataset.samples, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(dataset.prototypes, dtype="<f8").tobytes())


def load_dataset(path):
    """Returns (dataset, split-or-None); bit-exact round trip with save_dataset."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != DATASET_MAGIC:
            raise FormatError(f"bad dataset magic {magic!r}")
        raw = fh.read(8)
        if len(raw) != 8:
            raise FormatError("truncated dataset header length")
        (hlen,) = struct.unpack("<Q", raw)
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise FormatError("truncated dataset header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"corrupt dataset header: {e}") from None
        try:
            spec = SyntheticSpec(**header["spec"])
            sample_shape = tuple(header["shapes"]["samples"])
            proto_shape = tuple(header["shapes"]["prototypes"])
            labels = np.asarray(header["class_map"], dtype=np.int64)
        except (KeyError, TypeError) as e:
            raise FormatError(f"dataset header missing fields: {e}") from None
        n_bytes = int(np.prod(sample_shape)) * 8
        buf = fh.read(n_bytes)
        if len(buf) != n_bytes:
            raise FormatError("dataset payload shorter than header claims")
        samples = np.frombuffer(buf, dtype="<f8").reshape(sample_shape).copy()
        p_bytes = int(np.prod(proto_shape)) * 8
        buf = fh.read(p_bytes)
        if len(buf) != p_bytes:
            raise FormatError("prototype payload shorter than header claims")
        prototypes = np.frombuffer(buf, dtype="<f8").reshape(proto_shape).copy()
        if fh.read(1):
            raise FormatError("trailing bytes after dataset payload")
    if len(labels) != sample_shape[0]:
        raise FormatError("class map length does not match payload")
    dataset = Dataset(spec=spec, samples=samples, labels=labels, prototypes=prototypes)
    split = GcdSplit.from_dict(header["split"]) if header.get("split") else None
    return dataset, split
