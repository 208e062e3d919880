"""Representation and pipeline diagnostics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from . import model as M


def alignment(f_a, f_b, beta=2.0):
    """Mean ||f(x) - f(x+)||^beta over paired rows."""
    f_a, f_b = np.atleast_2d(f_a), np.atleast_2d(f_b)
    if len(f_a) == 0:
        raise ValueError("alignment needs at least one pair")
    if f_a.shape != f_b.shape:
        raise ValueError(f"paired features differ in shape: {f_a.shape} vs {f_b.shape}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    return float(np.mean(np.linalg.norm(f_a - f_b, axis=1) ** beta))


def sample_class_pairs(labels, pairs_per_class, rng):
    """Random same-class index pairs (i != j), keyed by class."""
    labels = np.asarray(labels)
    out = {}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            continue
        a = rng.integers(0, len(idx), size=pairs_per_class)
        b = (a + rng.integers(1, len(idx), size=pairs_per_class)) % len(idx)
        out[int(c)] = (idx[a], idx[b])
    return out


def intra_class_alignment(feats, labels, pairs_per_class=200, beta=2.0, seed=0):
    rng = np.random.default_rng(seed)
    feats = np.asarray(feats)
    return {c: alignment(feats[i], feats[j], beta)
            for c, (i, j) in sample_class_pairs(labels, pairs_per_class, rng).items()}


def _vote(neighbor_labels, num_classes):
    counts = np.zeros((len(neighbor_labels), num_classes), dtype=np.int64)
    for col in neighbor_labels.T:
        counts[np.arange(len(col)), col] += 1
    return counts.argmax(axis=1)  # argmax takes the first, i.e. smallest, tied class


def knn_predict(train_x, train_y, test_x, k=5, num_classes=None):
    train_x, test_x = np.asarray(train_x, dtype=np.float64), np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    if len(train_x) == 0 or len(test_x) == 0:
        raise ValueError("kNN needs non-empty train and test sets")
    if not 1 <= k <= len(train_x):
        raise ValueError(f"k must lie in [1, {len(train_x)}]")
    C = num_classes or int(train_y.max()) + 1
    d2 = cdist(test_x, train_x, "sqeuclidean")
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return _vote(train_y[nearest], C)


def knn_accuracy(train_x, train_y, test_x, test_y, k=5):
    """Majority vote over the k nearest (Euclidean) training points."""
    C = int(max(np.max(train_y), np.max(test_y))) + 1
    pred = knn_predict(train_x, train_y, test_x, k, C)
    return float(np.mean(pred == np.asarray(test_y)))


def silhouette(x, labels):
    """Mean (b - a) / max(a, b); singletons and a = b = 0 score 0."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("silhouette needs at least two classes")
    dist = cdist(x, x)
    onehot = labels[:, None] == classes[None, :]
    sizes = onehot.sum(axis=0)
    sums = dist @ onehot
    own = np.searchsorted(classes, labels)
    own_size = sizes[own]
    a = np.where(own_size > 1, sums[np.arange(len(x)), own] / np.maximum(own_size - 1, 1), 0.0)
    means = sums / sizes[None, :]
    means[np.arange(len(x)), own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own_size > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def auc_score(scores, positive):
    """Probability a random positive outranks a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def detection_quality(split, noise_mask):
    """Precision/recall of the clean set against truly clean samples, and the
    AUC of the clean posterior as a clean-sample score."""
    noise_mask = np.asarray(noise_mask, dtype=bool)
    if len(noise_mask) != len(split.clean_posterior):
        raise ValueError(f"mask length {len(noise_mask)} != {len(split.clean_posterior)} samples")
    truly_clean = ~noise_mask
    predicted = split.clean_mask
    tp = int(np.sum(predicted & truly_clean))
    precision = tp / predicted.sum() if predicted.sum() else float("nan")
    recall = tp / truly_clean.sum() if truly_clean.sum() else float("nan")
    return float(precision), float(recall), auc_score(split.clean_posterior, truly_clean)


def test_accuracy(models, X, y):
    """Top-1 accuracy of the (network-averaged) class probabilities."""
    if isinstance(models, M.ModelParams):
        models = [models]
    probs = sum(M.predict_proba(m, X) for m in models) / len(models)
    return float(np.mean(probs.argmax(axis=1) == np.asarray(y)))


@dataclass
class MetricsReport:
    stage: str
    epoch: int
    test_accuracy: float = math.nan
    knn_accuracy: float = math.nan
    silhouette: float = math.nan
    alignment: dict = field(default_factory=dict)
    precision: float = math.nan
    recall: float = math.nan
    auc: float = math.nan
    clean_fraction: float = math.nan
    losses: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["alignment"] = {str(k): v for k, v in self.alignment.items()}
        return d

    def flat(self):
        """Scalar columns for tabular export."""
        row = {k: v for k, v in self.to_dict().items() if not isinstance(v, dict)}
        row["mean_alignment"] = float(np.mean(list(self.alignment.values()))) if self.alignment else math.nan
        for k, v in sorted(self.losses.items()):
            row[f"loss_{k}"] = v
        return row


def evaluate(models, train, test, knn_k=5, alignment_pairs=200, seed=0, stage="eval", epoch=0):
    """Full diagnostic suite on encoder features of the first network."""
    if isinstance(models, M.ModelParams):
        models = [models]
    net = models[0]
    report = MetricsReport(stage=stage, epoch=epoch)
    report.test_accuracy = test_accuracy(models, test.features, test.true_labels)
    z_train = M.embed(net, train.features)
    z_test = M.embed(net, test.features)
    k = min(knn_k, len(train))
    report.knn_accuracy = knn_accuracy(z_train, train.noisy_labels, z_test, test.true_labels, k)
    f_test = M.embed(net, test.features, projected=True)
    if len(np.unique(test.true_labels)) >= 2:
        report.silhouette = silhouette(f_test, test.true_labels)
    report.alignment = intra_class_alignment(f_test, test.true_labels, alignment_pairs, seed=seed)
    return report
