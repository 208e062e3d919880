"""Contrastive objectives on unit-norm projections.

All losses take projected features (rows on the unit sphere) and return a
scalar :class:`~chimera.tensor.Tensor`, so they can sit on a tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import ClassPartition
from .tensor import Tensor

# Additive mask for excluded logits. exp() of it underflows to exactly 0.
_MASKED = -1e9


@dataclass
class ContrastiveConfig:
    temperature: float = 0.5
    mix_alpha: float = 2.0
    lambda_pt: float = 0.2
    lambda_cl: float = 1.0
    lambda_mix: float = 0.2
    lambda_asym: float = 0.2
    # "symmetric": NT-Xent over both views; "literal": v1 anchors with v1 negatives only
    convention: str = "symmetric"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.mix_alpha <= 0:
            raise ValueError("mix_alpha must be positive")
        if self.convention not in ("symmetric", "literal"):
            raise ValueError(f"unknown negative convention {self.convention!r}")
        for name in ("lambda_pt", "lambda_cl", "lambda_mix", "lambda_asym"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def info_nce(anchor, positive, negatives, tau=0.5):
    """-log softmax of the positive similarity among [positive, negatives]."""
    negatives = T.as_tensor(negatives)
    if negatives.data.ndim == 1:
        negatives = T.concat([negatives])
    if negatives.shape[0] == 0:
        raise ValueError("info_nce needs at least one negative")
    candidates = T.concat([positive, negatives])
    sims = T.transpose(T.matmul(candidates, T.transpose(T.concat([anchor]))))
    logp = T.log_softmax(T.scale(sims, 1.0 / tau))
    return T.scale(T.sum(T.select_rows(T.transpose(logp), [0])), -1.0)


def supcl(anchor, positives, negatives, tau=0.5):
    """Supervised contrastive loss of one anchor: mean over its k1 positives of
    -log(e^{s+/tau} / (sum over positives + sum over negatives))."""
    positives = T.concat([positives])
    k1 = positives.shape[0]
    if k1 == 0:
        raise ValueError("supcl needs at least one positive")
    parts = [positives]
    negatives = T.as_tensor(negatives)
    if negatives.size:
        parts.append(negatives)
    sims = T.transpose(T.matmul(T.concat(parts), T.transpose(T.concat([anchor]))))
    logp = T.log_softmax(T.scale(sims, 1.0 / tau))
    pos = np.zeros(sims.shape)
    pos[0, :k1] = 1.0
    return T.scale(T.sum(T.mul(logp, pos)), -1.0 / k1)


def _masked_log_softmax(sim, tau, exclude):
    logits = T.scale(sim, 1.0 / tau)
    return T.log_softmax(T.add(logits, np.where(exclude, _MASKED, 0.0)))


def supcl_batch(feats, labels, tau=0.5):
    """Batch SupCL: every row is an anchor; positives share its label."""
    feats = T.as_tensor(feats)
    labels = np.asarray(labels)
    n = feats.shape[0]
    eye = np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    counts = pos.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("every anchor needs at least one positive")
    logp = _masked_log_softmax(T.matmul(feats, T.transpose(feats)), tau, eye)
    weights = pos / counts[:, None]
    return T.scale(T.sum(T.mul(logp, weights)), -1.0 / n)


def nt_xent(f1, f2, tau=0.5, convention="symmetric"):
    """Contrastive loss over m positive pairs (f1[i], f2[i]).

    ``symmetric`` anchors all 2m views against every other view (SimCLR);
    ``literal`` anchors only f1 rows and draws negatives from f1 alone.
    """
    f1, f2 = T.as_tensor(f1), T.as_tensor(f2)
    m = f1.shape[0]
    if m < 2:
        raise ValueError("need at least two positive pairs for in-batch negatives")
    if convention == "symmetric":
        feats = T.concat([f1, f2])
        partner = np.concatenate([np.arange(m, 2 * m), np.arange(m)])
        eye = np.eye(2 * m, dtype=bool)
        pos = np.zeros((2 * m, 2 * m))
        pos[np.arange(2 * m), partner] = 1.0
        logp = _masked_log_softmax(T.matmul(feats, T.transpose(feats)), tau, eye)
        return T.scale(T.sum(T.mul(logp, pos)), -1.0 / (2 * m))
    if convention == "literal":
        eye = np.eye(m)
        s11 = T.matmul(f1, T.transpose(f1))
        s12 = T.matmul(f1, T.transpose(f2))
        sims = T.add(T.mul(s11, 1.0 - eye), T.mul(s12, eye))
        logp = T.log_softmax(T.scale(sims, 1.0 / tau))
        return T.scale(T.sum(T.mul(logp, eye)), -1.0 / m)
    raise ValueError(f"unknown convention {convention!r}")


# -- mixed views -------------------------------------------------------------

@dataclass
class MixBatch:
    pairs: np.ndarray    # (m, 2) source indices, i != j
    lam: np.ndarray      # (m,)
    v1: np.ndarray       # mixed first views
    v2: np.ndarray       # mixed second views

    def __len__(self):
        return len(self.lam)


def random_pairs(n, rng):
    """Shuffle 0..n-1 into n//2 disjoint pairs; an odd leftover is paired
    with a reused index."""
    if n < 2:
        raise ValueError("need at least two samples to pair")
    perm = rng.permutation(n)
    if n % 2:
        reuse = perm[rng.integers(0, n - 1)]
        perm = np.append(perm, reuse)
    return perm.reshape(-1, 2)


def mix_views(views1, views2, pairs, lam):
    """x_{i,j}(lam) = lam * x_i + (1 - lam) * x_j for both views."""
    views1, views2 = np.asarray(views1), np.asarray(views2)
    i, j = pairs[:, 0], pairs[:, 1]
    w = np.asarray(lam)[:, None]
    return w * views1[i] + (1 - w) * views1[j], w * views2[i] + (1 - w) * views2[j]


def build_mix_pairs(views1, views2, alpha, rng, pairs=None, lam=None):
    """Random disjoint pairing with one Beta(alpha, alpha) ratio per pair."""
    views1 = np.asarray(views1)
    if len(views1) < 2:
        raise ValueError("batch must hold at least two samples")
    if pairs is None:
        pairs = random_pairs(len(views1), rng)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if lam is None:
        lam = rng.beta(alpha, alpha, size=len(pairs))
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (len(pairs),)).copy()
    v1, v2 = mix_views(views1, views2, pairs, lam)
    return MixBatch(pairs, lam, v1, v2)


def mixclr_loss(f1, f2, tau=0.5, convention="symmetric"):
    """Contrastive loss whose positives are the two projected mixed views of
    the same (i, j, lam) draw; other mixed views act as negatives."""
    return nt_xent(f1, f2, tau, convention)


def pretrain_loss(cl_f1, cl_f2, mix_f1, mix_f2, cfg):
    """L_CL + lambda_pt * L_MixCLR; the batch mean stands in for the
    expectation over mixing draws."""
    loss = nt_xent(cl_f1, cl_f2, cfg.temperature, cfg.convention)
    if cfg.lambda_pt:
        loss = T.add(loss, T.scale(mixclr_loss(mix_f1, mix_f2, cfg.temperature, cfg.convention), cfg.lambda_pt))
    return loss


def asymix_pairs(labels, partition, rng):
    """Pair samples only with others whose label falls in the same subset.

    Odd clusters reuse one of their members; clusters of a single sample
    have no partner and are skipped.
    """
    labels = np.asarray(labels)
    lookup = partition.subset_of()
    missing = sorted({int(c) for c in labels} - set(lookup))
    if missing:
        raise ValueError(f"labels {missing} are not covered by the partition")
    groups = np.array([lookup[int(c)] for c in labels])
    out = []
    for g in range(len(partition.subsets)):
        members = np.flatnonzero(groups == g)
        if len(members) < 2:
            continue
        out.append(members[random_pairs(len(members), rng)])
    if not out:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(out, axis=0)


def clplus_loss(cl_f1, cl_f2, labels, mix_f1, mix_f2, cfg, mode="normal",
                asym_f1=None, asym_f2=None, partition=None):
    """Stage-II contrastive objective on the clean subset.

    normal: lambda_cl * SupCL + lambda_mix * MixCLR
    asym:   lambda_cl * CL + lambda_mix * MixCLR + lambda_asym * AsyMixCLR
    """
    tau = cfg.temperature
    terms = []
    if mode == "normal":
        if cfg.lambda_cl:
            feats = T.concat([cl_f1, cl_f2])
            both = np.concatenate([labels, labels])
            terms.append(T.scale(supcl_batch(feats, both, tau), cfg.lambda_cl))
    elif mode == "asym":
        if partition is None:
            raise ValueError("asym mode needs a class partition")
        if cfg.lambda_cl:
            terms.append(T.scale(nt_xent(cl_f1, cl_f2, tau, cfg.convention), cfg.lambda_cl))
        if cfg.lambda_asym and asym_f1 is not None and asym_f1.shape[0] >= 2:
            terms.append(T.scale(mixclr_loss(asym_f1, asym_f2, tau, cfg.convention), cfg.lambda_asym))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if cfg.lambda_mix and mix_f1 is not None:
        terms.append(T.scale(mixclr_loss(mix_f1, mix_f2, tau, cfg.convention), cfg.lambda_mix))
    if not terms:
        return Tensor(0.0)
    loss = terms[0]
    for t in terms[1:]:
        loss = T.add(loss, t)
    return loss


__all__ = [
    "ContrastiveConfig", "MixBatch", "info_nce", "supcl", "supcl_batch", "nt_xent",
    "random_pairs", "mix_views", "build_mix_pairs", "mixclr_loss", "pretrain_loss",
    "asymix_pairs", "clplus_loss", "ClassPartition",
]
