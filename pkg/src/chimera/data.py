"""Synthetic blobs, label-noise injectors, augmentations and noise audits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

FORMAT_VERSION = 1


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass
class NoisyDataset:
    """Features with hidden true labels and observed (possibly noisy) labels.

    ``true_labels`` are only meant for evaluation and noise audits.
    """

    features: np.ndarray
    true_labels: np.ndarray
    noisy_labels: np.ndarray
    num_classes: int
    prior: np.ndarray = None
    noise_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        self.noisy_labels = np.asarray(self.noisy_labels, dtype=np.int64)
        if self.prior is None:
            self.prior = np.full(self.num_classes, 1.0 / self.num_classes)
        self.prior = np.asarray(self.prior, dtype=np.float64)
        n = len(self.features)
        if self.true_labels.shape != (n,) or self.noisy_labels.shape != (n,):
            raise ValueError("label arrays must match the number of samples")
        for labels in (self.true_labels, self.noisy_labels):
            if n and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ValueError("labels must lie in [0, num_classes)")
        if abs(self.prior.sum() - 1.0) > 1e-9 or self.prior.shape != (self.num_classes,):
            raise ValueError("prior must be a probability vector over the classes")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self):
        return len(self.features)

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def noise_mask(self):
        """True where the observed label is wrong."""
        return self.noisy_labels != self.true_labels

    def noise_ratio(self):
        return float(self.noise_mask.mean()) if len(self) else 0.0

    def subset(self, index):
        index = np.asarray(index)
        return replace(self, features=self.features[index], true_labels=self.true_labels[index],
                       noisy_labels=self.noisy_labels[index], noise_meta=dict(self.noise_meta))

    def with_labels(self, noisy_labels, meta):
        return replace(self, noisy_labels=np.asarray(noisy_labels, dtype=np.int64), noise_meta=meta)


@dataclass(frozen=True)
class ClassPartition:
    subsets: tuple

    def __init__(self, subsets):
        object.__setattr__(self, "subsets", tuple(tuple(sorted(int(c) for c in s)) for s in subsets))

    def validate(self, num_classes):
        seen = [c for s in self.subsets for c in s]
        if len(seen) != len(set(seen)):
            raise ValueError(f"partition subsets overlap: {self.subsets}")
        if sorted(seen) != list(range(num_classes)):
            raise ValueError(f"partition does not cover classes 0..{num_classes - 1}: {self.subsets}")
        if any(len(s) == 0 for s in self.subsets):
            raise ValueError("partition has an empty subset")
        return self

    def subset_of(self):
        """Mapping class -> subset index."""
        return {c: k for k, s in enumerate(self.subsets) for c in s}

    def canonical(self):
        return tuple(sorted(self.subsets))

    def __eq__(self, other):
        if not isinstance(other, ClassPartition):
            return NotImplemented
        return self.canonical() == other.canonical()

    def __hash__(self):
        return hash(self.canonical())

    def to_list(self):
        return [list(s) for s in self.canonical()]

    @classmethod
    def pairs(cls, num_classes):
        """{{0,1},{2,3},...}; an odd last class stays alone."""
        return cls([tuple(range(i, min(i + 2, num_classes))) for i in range(0, num_classes, 2)])


# -- generation ---------------------------------------------------------

def make_blobs(num_classes, per_class, dim, separation, seed=0):
    """Isotropic unit-variance Gaussian blobs around random directions."""
    if num_classes < 1 or per_class < 1:
        raise ValueError("num_classes and per_class must be positive")
    if dim < 2:
        raise ValueError("dim must be at least 2")
    if separation <= 0:
        raise ValueError("separation must be positive")
    rng = _rng(seed)
    dirs = rng.standard_normal((num_classes, dim))
    centers = separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    labels = np.repeat(np.arange(num_classes), per_class)
    X = centers[labels] + rng.standard_normal((len(labels), dim))
    meta = {"kind": "clean", "r": 0.0, "seed": None,
            "generator": {"num_classes": num_classes, "per_class": per_class, "dim": dim,
                          "separation": separation, "seed": seed if isinstance(seed, int) else None}}
    return NoisyDataset(X, labels, labels.copy(), num_classes, noise_meta=meta)


def train_test_split(ds, test_per_class, seed=0):
    """Stratified hold-out; the test part keeps clean labels."""
    rng = _rng(seed)
    test_idx = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.true_labels == c)
        test_idx.extend(rng.choice(idx, size=min(test_per_class, len(idx)), replace=False))
    test_mask = np.zeros(len(ds), dtype=bool)
    test_mask[np.asarray(test_idx, dtype=np.int64)] = True
    train = ds.subset(np.flatnonzero(~test_mask))
    test = ds.subset(np.flatnonzero(test_mask))
    test.noisy_labels = test.true_labels.copy()
    return train, test


# -- noise ----------------------------------------------------------------

def _check_ratio(r):
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"noise ratio must lie in [0, 1], got {r}")


def inject_symmetric(ds, r, seed=0):
    """Flip each label with probability r to one of the other C-1 classes."""
    _check_ratio(r)
    rng = _rng(seed)
    C = ds.num_classes
    y = ds.true_labels
    flip = rng.random(len(y)) < r
    # uniform over the C-1 wrong classes: shift by 1..C-1
    offset = rng.integers(1, C, size=len(y)) if C > 1 else np.zeros(len(y), dtype=np.int64)
    noisy = np.where(flip & (C > 1), (y + offset) % C, y)
    return ds.with_labels(noisy, {"kind": "symmetric", "r": r, "seed": _seed_meta(seed)})


def inject_asymmetric(ds, r, partition, seed=0):
    """Flip with probability r to another member of the true label's subset."""
    _check_ratio(r)
    partition.validate(ds.num_classes)
    rng = _rng(seed)
    y = ds.true_labels
    flip = rng.random(len(y)) < r
    draw = rng.random(len(y))
    members = {c: s for s in partition.subsets for c in s}
    noisy = y.copy()
    for i in np.flatnonzero(flip):
        others = [c for c in members[int(y[i])] if c != y[i]]
        if others:
            noisy[i] = others[int(draw[i] * len(others))]
    meta = {"kind": "asymmetric", "r": r, "seed": _seed_meta(seed), "partition": partition.to_list()}
    return ds.with_labels(noisy, meta)


IDN_STD = 0.1


def idn_flip_distribution(x, y, q, W):
    """Row-stochastic label distribution for one sample: the true class keeps
    1-q; the rest is softmax(x @ W) restricted to the other classes, times q."""
    scores = x @ W
    scores = scores.astype(np.float64).copy()
    scores[y] = -np.inf
    e = np.exp(scores - scores[np.isfinite(scores)].max())
    e[y] = 0.0
    dist = q * e / e.sum()
    dist[y] = 1.0 - q
    return dist


def inject_instance_dependent(ds, r, seed=0):
    """Part-dependent style noise with per-sample flip rates around r."""
    _check_ratio(r)
    rng = _rng(seed)
    C = ds.num_classes
    q = np.clip(rng.normal(r, IDN_STD, size=len(ds)), 0.0, 1.0) if r > 0 else np.zeros(len(ds))
    W = rng.standard_normal((ds.dim, C))
    u = rng.random(len(ds))
    noisy = ds.true_labels.copy()
    for i in range(len(ds)):
        if q[i] == 0.0 or C < 2:
            continue
        dist = idn_flip_distribution(ds.features[i], int(ds.true_labels[i]), q[i], W)
        noisy[i] = min(int(np.searchsorted(np.cumsum(dist), u[i], side="right")), C - 1)
    meta = {"kind": "instance", "r": r, "seed": _seed_meta(seed), "rate_std": IDN_STD,
            "flip_form": "softmax(x @ W) over wrong classes"}
    return ds.with_labels(noisy, meta)


def _seed_meta(seed):
    return int(seed) if isinstance(seed, (int, np.integer)) else None


def inject_noise(ds, kind, r, seed=0, partition=None):
    if kind == "symmetric":
        return inject_symmetric(ds, r, seed)
    if kind == "asymmetric":
        if partition is None:
            partition = ClassPartition.pairs(ds.num_classes)
        return inject_asymmetric(ds, r, partition, seed)
    if kind in ("instance", "idn"):
        return inject_instance_dependent(ds, r, seed)
    if kind in ("none", "clean"):
        return ds
    raise ValueError(f"unknown noise kind {kind!r}")


def empirical_confusion(ds, normalize=False):
    """counts[j, k] = #{i : true = j, observed = k}."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    C = ds.num_classes
    counts = np.zeros((C, C), dtype=np.int64)
    np.add.at(counts, (ds.true_labels, ds.noisy_labels), 1)
    if not normalize:
        return counts
    rows = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, rows, out=np.zeros((C, C)), where=rows > 0)


def class_flip_ratios(ds):
    """r^(k) = 1 - normalized diagonal."""
    return 1.0 - np.diag(empirical_confusion(ds, normalize=True))


def is_feasible(confusion):
    """Every class keeps a plurality of its own samples."""
    confusion = np.asarray(confusion)
    return bool(np.all(np.diag(confusion) >= confusion.max(axis=1)))


# -- augmentation -------------------------------------------------------

@dataclass(frozen=True)
class AugmentationSpec:
    jitter_sigma: float = 0.0
    dropout_prob: float = 0.0
    strength: str = "custom"

    def __post_init__(self):
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be nonnegative")
        if not 0 <= self.dropout_prob <= 1:
            raise ValueError("dropout_prob must lie in [0, 1]")

    @classmethod
    def weak(cls, feature_std=1.0):
        return cls(0.05 * feature_std, 0.05, "weak")

    @classmethod
    def strong(cls, feature_std=1.0):
        return cls(0.2 * feature_std, 0.2, "strong")

    @classmethod
    def identity(cls):
        return cls(0.0, 0.0, "identity")


def augment(x, spec, seed=0):
    """Additive Gaussian jitter followed by per-coordinate zeroing.

    Accepts a single vector or a batch of row vectors.
    """
    rng = _rng(seed)
    x = np.asarray(x, dtype=np.float64)
    if spec.jitter_sigma == 0 and spec.dropout_prob == 0:
        return x.copy()
    out = x + spec.jitter_sigma * rng.standard_normal(x.shape) if spec.jitter_sigma > 0 else x.copy()
    if spec.dropout_prob > 0:
        out = out * (rng.random(x.shape) >= spec.dropout_prob)
    return out


# -- serialization --------------------------------------------------------

def save_dataset(ds, path):
    """One JSON header line, then ``index;features;true;noisy`` per sample."""
    header = {"format": "chimera-dataset", "version": FORMAT_VERSION, "num_classes": ds.num_classes,
              "n": len(ds), "dim": ds.dim if len(ds) else 0, "prior": [float(p) for p in ds.prior],
              "noise_meta": ds.noise_meta}
    lines = [json.dumps(header, sort_keys=True)]
    for i in range(len(ds)):
        feats = ",".join(repr(float(v)) for v in ds.features[i])
        lines.append(f"{i};{feats};{int(ds.true_labels[i])};{int(ds.noisy_labels[i])}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path):
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "chimera-dataset" or header.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: not a chimera dataset file (version {FORMAT_VERSION})")
        X, y, yn = [], [], []
        for expected, line in enumerate(fh):
            idx, feats, t, n = line.rstrip("\n").split(";")
            if int(idx) != expected:
                raise ValueError(f"{path}: record {expected} has index {idx}")
            X.append([float(v) for v in feats.split(",")])
            y.append(int(t))
            yn.append(int(n))
    X = np.asarray(X, dtype=np.float64).reshape(len(X), header["dim"])
    return NoisyDataset(X, y, yn, header["num_classes"], np.asarray(header["prior"]), header["noise_meta"])
