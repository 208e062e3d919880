"""MixMatch-style noise correction: label guessing and refinement,
sharpening, labeled/unlabeled mixup and the semi-supervised losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .data import AugmentationSpec, augment
from .tensor import Tensor

log = logging.getLogger(__name__)

MEAN_FLOOR = 1e-12


@dataclass
class SemiConfig:
    sharpen_temperature: float = 0.5
    num_augments: int = 2
    alpha: float = 4.0
    lambda_u: float = 25.0
    lambda_reg: float = 1.0
    prior: tuple = None

    def __post_init__(self):
        if self.sharpen_temperature <= 0:
            raise ValueError("sharpening temperature must be positive")
        if self.num_augments < 1:
            raise ValueError("num_augments must be at least 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


def co_guess(models, u, num_augments=1, spec=None, rng=None):
    """Average classifier probabilities over augmentations and networks."""
    if isinstance(models, M.ModelParams):
        models = [models]
    spec = spec or AugmentationSpec.identity()
    rng = rng if rng is not None else np.random.default_rng(0)
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    U = u[None, :] if single else u
    total = np.zeros((len(U), models[0].num_classes))
    for _ in range(num_augments):
        view = augment(U, spec, rng)
        for net in models:
            total += M.predict_proba(net, view)
    avg = total / (num_augments * len(models))
    return avg[0] if single else avg


def refine(noisy_onehot, guess, w):
    """w * y_noisy + (1 - w) * guess (row-wise when batched)."""
    w = np.asarray(w, dtype=np.float64)
    if np.any((w < 0) | (w > 1)):
        raise ValueError("clean probability must lie in [0, 1]")
    if w.ndim == 1:
        w = w[:, None]
    return w * np.asarray(noisy_onehot, dtype=np.float64) + (1 - w) * np.asarray(guess, dtype=np.float64)


def sharpen(q, temperature):
    q = np.asarray(q, dtype=np.float64)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    powered = q ** (1.0 / temperature)
    total = powered.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise ValueError("cannot sharpen an all-zero vector")
    return powered / total


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


@dataclass
class MixMatchBatch:
    x_mixed: np.ndarray
    y_mixed: np.ndarray
    u_mixed: np.ndarray
    p_mixed: np.ndarray
    lam1: np.ndarray

    @property
    def lam2(self):
        return 1.0 - self.lam1


def mixmatch(x, y_hat, u, p_hat, alpha, rng=None, lam=None):
    """Pair labeled row i with unlabeled row i.

    lam1 = max(lam, 1 - lam) keeps the labeled mix closer to x; the
    unlabeled mix uses lam2 = 1 - lam1 on the same (x, u) pair.
    """
    x, u = np.asarray(x, dtype=np.float64), np.asarray(u, dtype=np.float64)
    y_hat, p_hat = np.asarray(y_hat, dtype=np.float64), np.asarray(p_hat, dtype=np.float64)
    if len(x) != len(u) or len(y_hat) != len(x) or len(p_hat) != len(u):
        raise ValueError(f"labeled and unlabeled batches must pair one-to-one ({len(x)} vs {len(u)})")
    if lam is None:
        lam = rng.beta(alpha, alpha, size=len(x))
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (len(x),))
    lam1 = np.maximum(lam, 1.0 - lam)
    a, b = lam1[:, None], 1.0 - lam1[:, None]
    return MixMatchBatch(
        x_mixed=a * x + b * u,
        y_mixed=a * y_hat + b * p_hat,
        u_mixed=b * x + a * u,
        p_mixed=b * y_hat + a * p_hat,
        lam1=lam1.copy(),
    )


def semi_losses(batch, params):
    """Returns (L_X', L_U', predictions on X' and U' stacked)."""
    nx = len(batch.x_mixed)
    logit = M.logits(params, Tensor(np.concatenate([batch.x_mixed, batch.u_mixed])))
    logp = T.log_softmax(logit)
    probs = T.softmax(logit)
    target_x = np.zeros(logit.shape)
    target_x[:nx] = batch.y_mixed
    lx = T.scale(T.sum(T.mul(logp, target_x)), -1.0 / nx)
    target_u = np.zeros(logit.shape)
    target_u[nx:] = batch.p_mixed
    u_mask = np.zeros(logit.shape)
    u_mask[nx:] = 1.0
    resid = T.mul(T.sub(probs, target_u), u_mask)
    lu = T.scale(T.sum(T.square(resid)), 1.0 / len(batch.u_mixed))
    return lx, lu, probs


def prior_reg(probs, prior):
    """KL(prior || batch-average prediction)."""
    prior = np.asarray(prior, dtype=np.float64)
    if np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-9:
        raise ValueError("prior must be a probability vector")
    probs = T.as_tensor(probs)
    avg = T.mean(probs, axis=0)
    if np.any(avg.data < MEAN_FLOOR):
        log.warning("batch-average prediction below %g for some class; clamping", MEAN_FLOOR)
        avg = T.clamp_min(avg, MEAN_FLOOR)
    support = prior > 0
    const = float(np.sum(prior[support] * np.log(prior[support])))
    return T.add(T.scale(T.sum(T.mul(T.log(avg), prior)), -1.0), const)


def noise_corrector_loss(batch, params, cfg, prior=None):
    """L_X' + lambda_u * L_U' + lambda_reg * L_reg, plus the parts."""
    lx, lu, probs = semi_losses(batch, params)
    prior = prior if prior is not None else cfg.prior
    if prior is None:
        prior = np.full(params.num_classes, 1.0 / params.num_classes)
    reg = prior_reg(probs, prior) if cfg.lambda_reg else Tensor(0.0)
    total = T.add(T.add(lx, T.scale(lu, cfg.lambda_u)), T.scale(reg, cfg.lambda_reg))
    return total, {"lx": lx.item(), "lu": lu.item(), "reg": reg.item()}


def prepare_targets(params, x_clean, y_noisy, w, u_noisy, cfg, rng, peers=(), weak=None):
    """Guess, refine and sharpen targets for a labeled and an unlabeled batch.

    The labeled side is refined with the trained network's own guess; the
    unlabeled side is guessed by the trained network and its peers.
    """
    C = params.num_classes
    guess_x = co_guess([params], x_clean, cfg.num_augments, weak, rng)
    y_bar = refine(one_hot(y_noisy, C), guess_x, w)
    guess_u = co_guess([params, *peers], u_noisy, cfg.num_augments, weak, rng)
    return sharpen(y_bar, cfg.sharpen_temperature), sharpen(guess_u, cfg.sharpen_temperature)


def diffusion_loss_reference(x, y_noisy, u, params, alpha, lambda_u, rng=None, lam=None, guess=None):
    """Monte Carlo label-diffusion objective over paired rows (x_i, u_i).

    CE of cls(lam x + (1-lam) u) against lam y + (1-lam) p_u, plus
    lambda_u times the squared error of cls((1-lam) x + lam u) against
    (1-lam) y + lam p_u, with lam = max(l, 1-l), l ~ Beta(alpha, alpha).
    The guess p_u is treated as a constant target; pass ``guess`` to pin it
    (it defaults to the current predictions on u).
    """
    x, u = np.atleast_2d(np.asarray(x, dtype=np.float64)), np.atleast_2d(np.asarray(u, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y_noisy, dtype=np.float64))
    if lam is None:
        lam = rng.beta(alpha, alpha, size=len(x))
    lam = np.maximum(np.asarray(lam, dtype=np.float64), 1.0 - np.asarray(lam, dtype=np.float64))
    p_u = M.predict_proba(params, u) if guess is None else np.atleast_2d(np.asarray(guess, dtype=np.float64))
    total = None
    for i in range(len(x)):
        a = lam[i]
        fwd = M.logits(params, Tensor(a * x[i] + (1 - a) * u[i]))
        ce = T.scale(T.sum(T.mul(T.log_softmax(fwd), (a * y[i] + (1 - a) * p_u[i])[None, :])), -1.0)
        back = T.softmax(M.logits(params, Tensor((1 - a) * x[i] + a * u[i])))
        sq = T.sum(T.square(T.sub(back, ((1 - a) * y[i] + a * p_u[i])[None, :])))
        term = T.add(ce, T.scale(sq, lambda_u))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / len(x))
