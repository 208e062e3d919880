"""Two-stage training: contrastive pretraining, classifier warm-up, then
iterative GMM split + concentrated contrastive learning + MixMatch
correction."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import contrastive as CL
from . import detector as D
from . import metrics as MET
from . import model as M
from . import semi as S
from . import tensor as T
from .data import AugmentationSpec, ClassPartition, augment
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

STAGES = ("pretrain", "warmup", "semi")


@dataclass
class TrainConfig:
    e_pre: int = 100
    e_w: int = 10
    e_semi: int = 30
    iters: int = 0             # stage-II iterations per epoch; 0 -> one pass over the data
    b1: int = 64
    b2: int = 32
    mode: str = "normal"
    contrastive: CL.ContrastiveConfig = field(default_factory=CL.ContrastiveConfig)
    semi: S.SemiConfig = field(default_factory=S.SemiConfig)
    delta: float = 0.5
    em_max_iter: int = 100
    em_tol: float = 1e-8
    tau_asym: float = 0.9
    max_subset: int = 3
    partition_first_k_only: bool = False
    lr_pre: float = 0.05
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epoch: int = 0    # stage-II epoch at which lr is divided by 10; 0 disables
    dual_network: bool = True
    confidence_penalty: float = 0.0
    pretrain: str = "mixclr"   # mixclr | simclr | none
    use_asymix: bool = True
    double_count_mixclr: bool = False
    hidden: tuple = (64, 64)
    proj_hidden: int = 64
    proj_dim: int = 16
    knn_k: int = 5
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.contrastive, dict):
            self.contrastive = CL.ContrastiveConfig(**self.contrastive)
        if isinstance(self.semi, dict):
            self.semi = S.SemiConfig(**self.semi)
        self.hidden = tuple(self.hidden)
        if self.b1 < 2 or self.b2 < 2:
            raise ValueError("batch sizes must be at least 2")
        for name in ("e_pre", "e_w", "e_semi", "iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.mode not in ("normal", "asym"):
            raise ValueError(f"mode must be 'normal' or 'asym', got {self.mode!r}")
        if self.pretrain not in ("mixclr", "simclr", "none"):
            raise ValueError(f"unknown pretraining variant {self.pretrain!r}")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class RunState:
    models: list
    rng: np.random.Generator
    optimizers: list = field(default_factory=list)
    stage: str = "pretrain"
    epochs: dict = field(default_factory=lambda: {s: 0 for s in STAGES})
    splits: list = field(default_factory=list)
    partition: ClassPartition = None
    history: list = field(default_factory=list)

    @property
    def num_nets(self):
        return len(self.models)


def init_state(ds, cfg):
    rng = np.random.default_rng(cfg.seed)
    n_nets = 2 if cfg.dual_network else 1
    seeds = rng.integers(0, 2**63 - 1, size=n_nets)
    models = [M.init_model(ds.dim, ds.num_classes, np.random.default_rng(int(s)), cfg.hidden,
                           cfg.proj_hidden, cfg.proj_dim) for s in seeds]
    return RunState(models=models, rng=rng)


def _feature_std(ds):
    return float(ds.features.std())


def _optimizer(state, k, lr, cfg):
    while len(state.optimizers) <= k:
        state.optimizers.append(None)
    if state.optimizers[k] is None:
        state.optimizers[k] = M.OptimizerState.for_params(
            state.models[k], learning_rate=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return state.optimizers[k]


def _enter_stage(state, stage):
    if state.stage != stage:
        state.stage = stage
        state.optimizers = []


def _batches(n, size, rng, drop_last=True):
    perm = rng.permutation(n)
    stop = n - n % size if drop_last else n
    return [perm[i:i + size] for i in range(0, stop, size) if len(perm[i:i + size]) >= 2]


def _step(params, opt, loss, tape, groups):
    params.zero_grad()
    tape.backward(loss)
    M.sgd_step(params, opt, groups)


# -- stage I -----------------------------------------------------------------

def pretrain_epoch(ds, cfg, state):
    """One pass over the data in batches of 2*B1; labels are never read."""
    ccfg = cfg.contrastive
    lam_pt = 0.0 if cfg.pretrain == "simclr" else ccfg.lambda_pt
    strong = AugmentationSpec.strong(_feature_std(ds))
    losses = []
    for k, net in enumerate(state.models):
        opt = _optimizer(state, k, cfg.lr_pre, cfg)
        for idx in _batches(len(ds), 2 * cfg.b1, state.rng):
            x = ds.features[idx]
            v1, v2 = augment(x, strong, state.rng), augment(x, strong, state.rng)
            with Tape() as tape:
                f1, f2 = M.features(net, Tensor(v1)), M.features(net, Tensor(v2))
                loss = CL.nt_xent(f1, f2, ccfg.temperature, ccfg.convention)
                if lam_pt:
                    mix = CL.build_mix_pairs(v1, v2, ccfg.mix_alpha, state.rng)
                    m1, m2 = M.features(net, Tensor(mix.v1)), M.features(net, Tensor(mix.v2))
                    loss = T.add(loss, T.scale(CL.mixclr_loss(m1, m2, ccfg.temperature, ccfg.convention), lam_pt))
            _step(net, opt, loss, tape, ("encoder", "projector"))
            losses.append(loss.item())
    return float(np.mean(losses)) if losses else float("nan")


def pretrain_stage(ds, cfg, state=None, on_epoch=None):
    """E_pre epochs of CL (+ MixCLR) on the encoder and projector."""
    state = state or init_state(ds, cfg)
    if cfg.pretrain == "none":
        state.epochs["pretrain"] = max(state.epochs["pretrain"], cfg.e_pre)
    elif state.epochs["pretrain"] < cfg.e_pre and len(ds) < 2 * cfg.b1:
        raise ValueError(f"dataset of {len(ds)} samples is smaller than 2*B1 = {2 * cfg.b1}")
    while state.epochs["pretrain"] < cfg.e_pre:
        _enter_stage(state, "pretrain")
        loss = pretrain_epoch(ds, cfg, state)
        state.epochs["pretrain"] += 1
        state.history.append({"stage": "pretrain", "epoch": state.epochs["pretrain"], "loss_pretrain": loss})
        _notify(on_epoch, state)
    return state


# -- warm-up -----------------------------------------------------------------

def warmup_loss(logit, labels, penalty=0.0):
    """Mean CE on the given labels plus penalty * sum_c p_c log p_c."""
    logp = T.log_softmax(logit)
    C = logit.shape[1]
    onehot = S.one_hot(labels, C)
    loss = T.scale(T.sum(T.mul(logp, onehot)), -1.0 / logit.shape[0])
    if penalty:
        neg_entropy = T.scale(T.sum(T.mul(T.softmax(logit), logp)), 1.0 / logit.shape[0])
        loss = T.add(loss, T.scale(neg_entropy, penalty))
    return loss


def warmup_epoch(ds, cfg, state, labels=None):
    labels = ds.noisy_labels if labels is None else labels
    weak = AugmentationSpec.weak(_feature_std(ds))
    losses = []
    for k, net in enumerate(state.models):
        opt = _optimizer(state, k, cfg.lr, cfg)
        for idx in _batches(len(ds), 2 * cfg.b2, state.rng):
            x = augment(ds.features[idx], weak, state.rng)
            with Tape() as tape:
                loss = warmup_loss(M.logits(net, Tensor(x)), labels[idx], cfg.confidence_penalty)
            _step(net, opt, loss, tape, ("encoder", "classifier"))
            losses.append(loss.item())
    return float(np.mean(losses)) if losses else float("nan")


def warmup_classifier(ds, cfg, state, test=None, on_epoch=None):
    """E_w epochs of cross-entropy on the noisy labels (encoder + classifier)."""
    while state.epochs["warmup"] < cfg.e_w:
        _enter_stage(state, "warmup")
        loss = warmup_epoch(ds, cfg, state)
        state.epochs["warmup"] += 1
        row = {"stage": "warmup", "epoch": state.epochs["warmup"], "loss_warmup": loss}
        if test is not None:
            row["test_accuracy"] = MET.test_accuracy(state.models, test.features, test.true_labels)
        state.history.append(row)
        _notify(on_epoch, state)
    return state


# -- stage II ----------------------------------------------------------------

def ensemble_proba(models, X):
    return sum(M.predict_proba(m, X) for m in models) / len(models)


def compute_splits(ds, cfg, models):
    """One split per network, from that network's own losses."""
    out = []
    for net in models:
        sp, _ = D.detect(M.predict_proba(net, ds.features), ds.noisy_labels, cfg.delta, cfg.em_max_iter, cfg.em_tol)
        out.append(sp)
    return out


def _draw(pool, size, rng):
    return rng.choice(pool, size=size, replace=len(pool) < size)


def stage2_iteration(ds, cfg, state, k, split, partition, strong, weak):
    """One optimisation step of network k on L_NC + L_CL+."""
    net = state.models[k]
    peers = [m for j, m in enumerate(state.models) if j != k]
    ccfg, scfg = cfg.contrastive, cfg.semi
    rng = state.rng
    n2 = 2 * cfg.b2
    clean_pool, noisy_pool = split.clean_idx, split.noisy_idx
    if len(noisy_pool) == 0:
        noisy_pool = np.arange(len(ds))
    xi = _draw(clean_pool, n2, rng)
    ui = _draw(noisy_pool, n2, rng)
    x_raw, y_noisy, w = ds.features[xi], ds.noisy_labels[xi], split.weights[xi]
    u_raw = ds.features[ui]

    # targets come from the current networks and are held fixed for this step
    y_hat, p_hat = S.prepare_targets(net, x_raw, y_noisy, w, u_raw, scfg, rng, peers, weak)

    v1, v2 = augment(x_raw, strong, rng), augment(x_raw, strong, rng)
    mix = CL.build_mix_pairs(v1, v2, ccfg.mix_alpha, rng)
    asym_mix = None
    if cfg.mode == "asym" and cfg.use_asymix and partition is not None:
        pairs = CL.asymix_pairs(y_noisy, partition, rng)
        if len(pairs) >= 2:
            asym_mix = CL.build_mix_pairs(v1, v2, ccfg.mix_alpha, rng, pairs=pairs)
    mm = S.mixmatch(augment(x_raw, strong, rng), y_hat, augment(u_raw, strong, rng), p_hat, scfg.alpha, rng)

    parts = {}
    with Tape() as tape:
        f1, f2 = M.features(net, Tensor(v1)), M.features(net, Tensor(v2))
        m1, m2 = M.features(net, Tensor(mix.v1)), M.features(net, Tensor(mix.v2))
        a1 = a2 = None
        if asym_mix is not None:
            a1, a2 = M.features(net, Tensor(asym_mix.v1)), M.features(net, Tensor(asym_mix.v2))
        cl_plus = CL.clplus_loss(f1, f2, y_noisy, m1, m2, ccfg, cfg.mode, a1, a2,
                                 partition if cfg.mode == "asym" else None)
        if cfg.double_count_mixclr and ccfg.lambda_mix:
            cl_plus = T.add(cl_plus, T.scale(CL.mixclr_loss(m1, m2, ccfg.temperature, ccfg.convention), ccfg.lambda_mix))
        nc, parts = S.noise_corrector_loss(mm, net, scfg, prior=ds.prior)
        total = T.add(nc, cl_plus)
    _step(net, state.optimizers[k], total, tape, ("encoder", "projector", "classifier"))
    parts["cl_plus"] = cl_plus.item()
    parts["total"] = total.item()
    return parts


def stage2_epoch(ds, cfg, state, test=None):
    """GMM split per network, then ITER steps per network (co-divided when dual)."""
    _enter_stage(state, "semi")
    epoch = state.epochs["semi"]
    lr = cfg.lr / 10 if cfg.lr_decay_epoch and epoch >= cfg.lr_decay_epoch else cfg.lr
    for k in range(state.num_nets):
        _optimizer(state, k, lr, cfg).learning_rate = lr

    splits = compute_splits(ds, cfg, state.models)
    for k, sp in enumerate(splits):
        if len(sp.clean_idx) == 0 or len(sp.noisy_idx) == 0:
            log.warning("stage II epoch %d: one-sided split for net %d; treating all samples as clean", epoch, k)
            splits[k] = D.SplitResult(sp.clean_posterior, np.arange(len(ds)), np.zeros(0, dtype=np.int64), sp.threshold)
    state.splits = splits

    partition = None
    if cfg.mode == "asym":
        partition = D.infer_partition(ensemble_proba(state.models, ds.features), ds.num_classes,
                                      cfg.tau_asym, cfg.max_subset, cfg.partition_first_k_only)
        state.partition = partition

    strong = AugmentationSpec.strong(_feature_std(ds))
    weak = AugmentationSpec.weak(_feature_std(ds))
    iters = cfg.iters or max(1, len(ds) // (2 * cfg.b2))
    sums = {}
    for k in range(state.num_nets):
        # co-divide: train on the peer's split
        split = splits[(k + 1) % state.num_nets]
        for _ in range(iters):
            for name, v in stage2_iteration(ds, cfg, state, k, split, partition, strong, weak).items():
                sums[name] = sums.get(name, 0.0) + v
    count = iters * state.num_nets
    state.epochs["semi"] += 1

    row = {"stage": "semi", "epoch": state.epochs["semi"]}
    row.update({f"loss_{k}": v / count for k, v in sums.items()})
    row.update(_detection_row(ds, cfg, state.models))
    row["clean_fraction"] = float(np.mean([len(s.clean_idx) / len(ds) for s in splits]))
    if partition is not None:
        row["partition"] = partition.to_list()
    if test is not None:
        row["test_accuracy"] = MET.test_accuracy(state.models, test.features, test.true_labels)
    state.history.append(row)
    return state


def _detection_row(ds, cfg, models):
    probs = ensemble_proba(models, ds.features)
    sp, _ = D.detect(probs, ds.noisy_labels, cfg.delta, cfg.em_max_iter, cfg.em_tol)
    precision, recall, auc = MET.detection_quality(sp, ds.noise_mask)
    return {"precision": precision, "recall": recall, "auc": auc}


def run(ds, cfg, test=None, state=None, on_epoch=None):
    """Stage I, warm-up and E_semi stage-II epochs; resumes from ``state``.

    ``on_epoch(state)`` is called at every epoch boundary (for checkpoints).
    """
    state = state or init_state(ds, cfg)
    pretrain_stage(ds, cfg, state, on_epoch)
    warmup_classifier(ds, cfg, state, test, on_epoch)
    while state.epochs["semi"] < cfg.e_semi:
        try:
            stage2_epoch(ds, cfg, state, test)
        except Exception as exc:
            raise RuntimeError(f"stage II epoch {state.epochs['semi'] + 1}: {exc}") from exc
        _notify(on_epoch, state)
    return state


def _notify(cb, state):
    if cb is not None:
        cb(state)


def train_ce_baseline(ds, cfg, test=None, epochs=None):
    """Plain cross-entropy on noisy labels: same architecture, optimizer and
    epoch budget, no pretraining, single network."""
    base = TrainConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, "dual_network": False})
    state = init_state(ds, base)
    total = cfg.e_pre + cfg.e_w + cfg.e_semi if epochs is None else epochs
    _enter_stage(state, "warmup")
    for e in range(total):
        loss = warmup_epoch(ds, base, state)
        row = {"stage": "baseline", "epoch": e + 1, "loss_ce": loss}
        if test is not None and (e + 1 == total):
            row["test_accuracy"] = MET.test_accuracy(state.models, test.features, test.true_labels)
        state.history.append(row)
    return state


# -- checkpoints ---------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def save_state(state, path, cfg=None):
    """Everything needed to resume bit-exactly: parameters, momentum buffers,
    RNG state, counters, latest splits and history."""
    arrays = {}
    for k, m in enumerate(state.models):
        arrays.update(M.params_to_arrays(m, prefix=f"net{k}/"))
    opt_meta = []
    for k, opt in enumerate(state.optimizers):
        if opt is None:
            opt_meta.append(None)
            continue
        opt_meta.append({"learning_rate": opt.learning_rate, "momentum": opt.momentum,
                         "weight_decay": opt.weight_decay, "names": sorted(opt.velocity)})
        for name, v in opt.velocity.items():
            arrays[f"opt{k}/{name}"] = v
    for k, sp in enumerate(state.splits):
        arrays[f"split{k}/posterior"] = sp.clean_posterior
        arrays[f"split{k}/clean"] = sp.clean_idx
        arrays[f"split{k}/noisy"] = sp.noisy_idx
    meta = {
        "version": M.CHECKPOINT_VERSION,
        "num_nets": state.num_nets,
        "stage": state.stage,
        "epochs": state.epochs,
        "rng": state.rng.bit_generator.state,
        "optimizers": opt_meta,
        "splits": [sp.threshold for sp in state.splits],
        "partition": state.partition.to_list() if state.partition is not None else None,
        "history": state.history,
        "config": cfg.to_dict() if cfg is not None else None,
    }
    arrays["__header__"] = np.frombuffer(json.dumps(_jsonable(meta)).encode(), dtype=np.uint8)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_state(path):
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(bytes(arrays.pop("__header__")).decode())
    if meta.get("version") != M.CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    models = [M.arrays_to_params(arrays, prefix=f"net{k}/") for k in range(meta["num_nets"])]
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    optimizers = []
    for k, om in enumerate(meta["optimizers"]):
        if om is None:
            optimizers.append(None)
            continue
        velocity = {name: arrays[f"opt{k}/{name}"] for name in om["names"]}
        optimizers.append(M.OptimizerState(om["learning_rate"], om["momentum"], om["weight_decay"], velocity))
    splits = [D.SplitResult(arrays[f"split{k}/posterior"], arrays[f"split{k}/clean"], arrays[f"split{k}/noisy"], thr)
              for k, thr in enumerate(meta["splits"])]
    partition = ClassPartition(meta["partition"]) if meta["partition"] else None
    state = RunState(models, rng, optimizers, meta["stage"], meta["epochs"], splits, partition, meta["history"])
    return state, meta.get("config")
