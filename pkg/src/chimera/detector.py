"""Loss-based noise detection: per-sample CE, a 2-component 1-D GMM fitted
by EM, thresholded clean/noisy splits and class-subset inference."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .data import ClassPartition

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
VAR_FLOOR = 1e-6
DEGENERATE_SPREAD = 1e-9


def per_sample_ce(probs, labels):
    """l_i = -log p_i[y_i] with probabilities floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError(f"labels must lie in [0, {probs.shape[1]})")
    picked = probs[np.arange(len(labels)), labels]
    return -np.log(np.maximum(picked, PROB_FLOOR))


@dataclass
class GmmFit:
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    clean_posterior: np.ndarray      # posterior of the smaller-mean component
    log_likelihood: list = field(default_factory=list)
    degenerate: bool = False

    @property
    def noisy_probability(self):
        return 1.0 - self.clean_posterior


def _log_normal(x, mean, var):
    return -0.5 * (np.log(2 * np.pi * var) + (x - mean) ** 2 / var)


def fit_gmm_em(losses, max_iter=100, tol=1e-8):
    """Two-component EM on a 1-D loss vector.

    Components start at the 10th/90th percentiles with the sample variance
    and equal weights. Component 0 of the result is always the clean
    (smaller-mean) one.
    """
    x = np.asarray(losses, dtype=np.float64).ravel()
    if x.size < 4:
        raise ValueError("need at least 4 losses to fit the mixture")
    if not np.all(np.isfinite(x)):
        raise ValueError("losses must be finite")
    if x.max() - x.min() <= DEGENERATE_SPREAD:
        log.warning("all %d losses coincide; treating every sample as clean", x.size)
        m = float(x.mean())
        return GmmFit(np.array([m, m]), np.array([VAR_FLOOR, VAR_FLOOR]), np.array([1.0, 0.0]),
                      np.ones(x.size), [], degenerate=True)

    means = np.percentile(x, [10, 90]).astype(np.float64)
    variances = np.full(2, max(x.var(), VAR_FLOOR))
    weights = np.array([0.5, 0.5])
    trace = []
    resp = None
    for _ in range(max_iter):
        logp = np.log(weights)[None, :] + _log_normal(x[:, None], means[None, :], variances[None, :])
        top = logp.max(axis=1, keepdims=True)
        lse = top[:, 0] + np.log(np.exp(logp - top).sum(axis=1))
        ll = float(lse.sum())
        resp = np.exp(logp - lse[:, None])
        if trace and ll - trace[-1] < tol:
            trace.append(ll)
            break
        trace.append(ll)
        nk = resp.sum(axis=0) + 1e-300
        weights = nk / x.size
        means = (resp * x[:, None]).sum(axis=0) / nk
        variances = np.maximum((resp * (x[:, None] - means[None, :]) ** 2).sum(axis=0) / nk, VAR_FLOOR)
    else:
        logp = np.log(weights)[None, :] + _log_normal(x[:, None], means[None, :], variances[None, :])
        top = logp.max(axis=1, keepdims=True)
        lse = top[:, 0] + np.log(np.exp(logp - top).sum(axis=1))
        trace.append(float(lse.sum()))
        resp = np.exp(logp - lse[:, None])

    order = np.argsort(means, kind="stable")
    weights = weights / weights.sum()
    return GmmFit(means[order], variances[order], weights[order], resp[:, order[0]], trace)


@dataclass
class SplitResult:
    clean_posterior: np.ndarray
    clean_idx: np.ndarray
    noisy_idx: np.ndarray
    threshold: float

    @property
    def weights(self):
        """w_i used for label refinement."""
        return self.clean_posterior

    @property
    def clean_mask(self):
        mask = np.zeros(len(self.clean_posterior), dtype=bool)
        mask[self.clean_idx] = True
        return mask

    def records(self):
        mask = self.clean_mask
        return [{"index": int(i), "clean_posterior": float(g), "assignment": "clean" if mask[i] else "noisy"}
                for i, g in enumerate(self.clean_posterior)]


def split(fit, delta=0.5):
    """Clean iff the noisy probability 1 - gamma_i is below delta."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {delta}")
    gamma = fit.clean_posterior if isinstance(fit, GmmFit) else np.asarray(fit, dtype=np.float64)
    clean = (1.0 - gamma) < delta
    return SplitResult(gamma.copy(), np.flatnonzero(clean), np.flatnonzero(~clean), delta)


def detect(probs, labels, delta=0.5, max_iter=100, tol=1e-8):
    losses = per_sample_ce(probs, labels)
    fit = fit_gmm_em(losses, max_iter=max_iter, tol=tol)
    return split(fit, delta), fit


@dataclass
class PartitionInferenceState:
    counts: Counter
    tau_asym: float
    max_size: int


def candidate_counts(probs, tau_asym=0.9, max_size=3, first_only=False):
    """Frequency table of top-k class sets whose mass reaches tau_asym.

    Every k in 1..max_size that crosses the threshold is recorded; with
    ``first_only`` only the smallest such k is.
    """
    if max_size < 1:
        raise ValueError("max subset size K must be at least 1")
    if not 0.0 < tau_asym < 1.0:
        raise ValueError("tau_asym must lie in (0, 1)")
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, axis=1, kind="stable")
    ranked = np.take_along_axis(probs, order, axis=1)
    cum = np.cumsum(ranked, axis=1)
    counts = Counter()
    K = min(max_size, probs.shape[1])
    for i in range(len(probs)):
        for k in range(1, K + 1):
            if cum[i, k - 1] >= tau_asym:
                counts[frozenset(int(c) for c in order[i, :k])] += 1
                if first_only:
                    break
    return PartitionInferenceState(counts, tau_asym, max_size)


def infer_partition(probs, num_classes, tau_asym=0.9, max_size=3, first_only=False):
    """Greedy non-overlapping class subsets from the most frequent candidates;
    classes never accepted form one final subset."""
    state = candidate_counts(probs, tau_asym, max_size, first_only)
    # most frequent first; ties go to the smaller set, then the lexicographically smaller one
    queue = sorted(state.counts.items(), key=lambda kv: (-kv[1], len(kv[0]), sorted(kv[0])))
    accepted, used = [], set()
    for subset, _ in queue:
        if subset & used:
            continue
        accepted.append(tuple(sorted(subset)))
        used |= subset
    rest = tuple(c for c in range(num_classes) if c not in used)
    if rest:
        accepted.append(rest)
    return ClassPartition(accepted).validate(num_classes)
