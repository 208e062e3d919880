"""Command-line harness: dataset generation, seeded runs with resumable
checkpoints, on-demand evaluation and partition inference.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import subprocess
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
import yaml
from filelock import FileLock, Timeout
from threadpoolctl import threadpool_limits

from . import __version__
from . import contrastive as CL
from . import data as Dt
from . import detector as D
from . import metrics as MET
from . import model as M
from . import pipeline as P
from . import semi as S

log = logging.getLogger("chimera")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
THREADS_ENV = "CHIMERA_THREADS"

CHECKPOINT = "checkpoint.npz"
FINAL = "final.npz"
TRAIN_FILE, TEST_FILE = "train.ds", "test.ds"
CSV_COLUMNS = ("stage", "epoch", "test_accuracy", "precision", "recall", "auc", "clean_fraction",
               "loss_pretrain", "loss_warmup", "loss_lx", "loss_lu", "loss_reg", "loss_cl_plus", "loss_total")


class ConfigError(Exception):
    pass


# -- configuration -------------------------------------------------------------

_TRAIN_KEYS = {f for f in P.TrainConfig.__dataclass_fields__}
_SCHEMA = {
    "seed": int,
    "dataset": {
        "path": str, "test_path": str,
        "num_classes": int, "per_class": int, "dim": int, "separation": float, "test_per_class": int,
    },
    "noise": {"kind": str, "r": float, "partition": object},
    "train": {
        **{k: object for k in _TRAIN_KEYS - {"contrastive", "semi"}},
        "contrastive": {k: object for k in CL.ContrastiveConfig.__dataclass_fields__},
        "semi": {k: object for k in S.SemiConfig.__dataclass_fields__},
    },
    "output": {"dir": str, "checkpoint_every": int, "baseline": bool},
}
_REQUIRED = ("noise.kind", "noise.r", "output.dir")
_GENERATOR_KEYS = ("num_classes", "per_class", "dim", "separation", "test_per_class")


def _check_block(block, schema, path):
    if not isinstance(block, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    for key, value in block.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in schema:
            raise ConfigError(f"unknown key '{where}'")
        expected = schema[key]
        if isinstance(expected, dict):
            _check_block(value, expected, where)
        elif expected is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            continue
        elif expected is not object and not isinstance(value, expected):
            raise ConfigError(f"'{where}' must be of type {expected.__name__}")


def _get(cfg, path):
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    return node


def validate_config(cfg):
    """Schema check done before any compute. Returns the config unchanged."""
    _check_block(cfg, _SCHEMA, "")
    for key in _REQUIRED:
        if _get(cfg, key) is None:
            raise ConfigError(f"missing required key '{key}'")
    ds = cfg.get("dataset")
    if ds is None:
        raise ConfigError("missing required key 'dataset'")
    if "path" not in ds:
        for key in _GENERATOR_KEYS:
            if key not in ds:
                raise ConfigError(f"missing required key 'dataset.{key}'")
    try:
        train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc
    return cfg


def load_config(path, seed=None, out=None):
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg.setdefault("output", {})["dir"] = out
    return validate_config(cfg)


def config_hash(cfg):
    """sha256 of the canonical JSON form; stable under key reordering."""
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def sub_seeds(seed):
    """Independent seeds for data generation, noise and training."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(3)]


def train_config(cfg):
    block = dict(cfg.get("train") or {})
    block["seed"] = sub_seeds(cfg.get("seed", 0))[2]
    return P.TrainConfig(**block)


def _partition(spec, C):
    if spec is None or spec == "pairs":
        return Dt.ClassPartition.pairs(C)
    return Dt.ClassPartition(spec).validate(C)


def build_datasets(cfg):
    """(train, test) from a dataset file or from the blob generator plus noise."""
    block = cfg["dataset"]
    if "path" in block:
        train = Dt.load_dataset(block["path"])
        test = Dt.load_dataset(block["test_path"]) if "test_path" in block else None
        return train, test
    data_seed, noise_seed, _ = sub_seeds(cfg.get("seed", 0))
    full = Dt.make_blobs(block["num_classes"], block["per_class"] + block["test_per_class"],
                         block["dim"], block["separation"], data_seed)
    train, test = Dt.train_test_split(full, block["test_per_class"], data_seed)
    noise = cfg["noise"]
    partition = _partition(noise.get("partition"), train.num_classes) if noise["kind"] == "asymmetric" else None
    train = Dt.inject_noise(train, noise["kind"], float(noise["r"]), noise_seed, partition)
    return train, test


# -- output records --------------------------------------------------------------

def version_string():
    """Package version plus the short commit hash when run from a git checkout."""
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _clean(value):
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return P._jsonable(value)


def _append(path, text):
    # one write per record so an interrupted run never leaves a partial line behind
    with open(path, "a") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())


def _csv_line(row):
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(
        ["" if row.get(c) is None else row.get(c) for c in CSV_COLUMNS])
    return buf.getvalue()


def _json_line(row):
    return json.dumps({k: _clean(v) for k, v in row.items()}, sort_keys=True) + "\n"


def _rewrite_metrics(out, history):
    """Rewrite both metric files from a (checkpointed) history."""
    for name, header, fmt in (("metrics.csv", _csv_line({c: c for c in CSV_COLUMNS}), _csv_line),
                              ("metrics.jsonl", "", _json_line)):
        tmp = out / f"{name}.tmp"
        tmp.write_text(header + "".join(fmt(r) for r in history))
        os.replace(tmp, out / name)


def _write_json(path, obj):
    tmp = Path(f"{path}.tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def final_report(models, train, test, tcfg, knn_k=None, alignment_pairs=200, labels="noisy"):
    """eval_metrics suite plus detector quality on the training set."""
    knn_train = train if labels == "noisy" else train.with_labels(train.true_labels, train.noise_meta)
    report = MET.evaluate(models, knn_train, test, knn_k or tcfg.knn_k, alignment_pairs, seed=tcfg.seed,
                          stage="final")
    if len(np.unique(train.noisy_labels)) > 1:
        probs = P.ensemble_proba(models, train.features)
        sp, _ = D.detect(probs, train.noisy_labels, tcfg.delta, tcfg.em_max_iter, tcfg.em_tol)
        report.precision, report.recall, report.auc = MET.detection_quality(sp, train.noise_mask)
        report.clean_fraction = len(sp.clean_idx) / len(train)
    return report


# -- commands ----------------------------------------------------------------------

def cmd_generate(args, cfg):
    out = Path(args.out or cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    train, test = build_datasets(cfg)
    Dt.save_dataset(train, out / TRAIN_FILE)
    if test is not None:
        Dt.save_dataset(test, out / TEST_FILE)
    confusion = Dt.empirical_confusion(train)
    print(f"classes={train.num_classes} n={len(train)} dim={train.dim} noise={train.noise_meta.get('kind', 'none')} "
          f"observed_ratio={train.noise_ratio():.4f}")
    print("empirical confusion (rows: true, cols: observed):")
    for row in confusion:
        print("  " + " ".join(f"{v:5d}" for v in row))
    print(f"feasible={Dt.is_feasible(confusion)}")
    print(f"wrote {out / TRAIN_FILE}")
    return EXIT_OK


def cmd_run(args, cfg):
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        lock = FileLock(str(out / ".lock"), timeout=0)
        lock.acquire()
    except Timeout:
        raise RuntimeError(f"{out} is in use by another run")
    try:
        return _run_locked(args, cfg, out)
    finally:
        lock.release()


def _run_locked(args, cfg, out):
    tcfg = train_config(cfg)
    digest = config_hash(cfg)
    train, test = build_datasets(cfg)
    ckpt = out / CHECKPOINT
    every = int(cfg["output"].get("checkpoint_every", 1))
    if args.resume:
        path = Path(args.resume) if isinstance(args.resume, str) else ckpt
        state, saved = P.load_state(path)
        if saved is not None and saved != P._jsonable(tcfg.to_dict()):
            raise ConfigError(f"checkpoint {path} was written by a different training config")
        log.info("resuming from %s at %s", path, state.epochs)
    else:
        state = P.init_state(train, tcfg)
    _rewrite_metrics(out, state.history)
    written = [len(state.history)]

    def on_epoch(st):
        for row in st.history[written[0]:]:
            _append(out / "metrics.csv", _csv_line(row))
            _append(out / "metrics.jsonl", _json_line(row))
        written[0] = len(st.history)
        if every and len(st.history) % every == 0:
            P.save_state(st, ckpt, tcfg)

    try:
        state = P.run(train, tcfg, test, state, on_epoch)
    except Exception as exc:
        e = state.epochs
        raise RuntimeError(f"run failed after pretrain={e['pretrain']} warmup={e['warmup']} "
                           f"semi={e['semi']} epochs: {exc}") from exc
    P.save_state(state, ckpt, tcfg)
    M.save_params(out / FINAL, state.models, {"config_hash": digest})
    report = final_report(state.models, train, test, tcfg, args.knn_k, args.alignment_pairs)
    summary = {
        "run_id": f"{digest[:12]}-{cfg.get('seed', 0)}",
        "config_hash": digest,
        "version": version_string(),
        "epochs": state.epochs,
        "history_rows": len(state.history),
        "partition": state.partition.to_list() if state.partition is not None else None,
        "final": {k: _clean(v) for k, v in report.to_dict().items()},
    }
    if cfg["output"].get("baseline"):
        # plain CE on the noisy labels with the same architecture and epoch budget
        base = P.train_ce_baseline(train, tcfg, test)
        summary["baseline_test_accuracy"] = base.history[-1]["test_accuracy"] if base.history else \
            MET.test_accuracy(base.models, test.features, test.true_labels)
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary["final"], sort_keys=True))
    return EXIT_OK


def _load_models(args, cfg, train):
    out = Path(cfg["output"]["dir"])
    path = Path(args.checkpoint) if args.checkpoint else out / FINAL
    if not path.exists():
        raise RuntimeError(f"no checkpoint at {path}")
    tcfg = train_config(cfg)
    ref = M.init_model(train.dim, train.num_classes, np.random.default_rng(0), tcfg.hidden, tcfg.proj_hidden,
                       tcfg.proj_dim)
    if path.name == CHECKPOINT:
        models = P.load_state(path)[0].models
        for m in models:
            if m.shapes() != ref.shapes():
                raise M.ShapeError("checkpoint architecture", *ref.shapes().values(), *m.shapes().values())
        return models, tcfg
    return M.load_params(path, ref.shapes())[0], tcfg


def _dataset_override(args, cfg):
    train, test = build_datasets(cfg)
    if args.dataset:
        train = Dt.load_dataset(args.dataset)
    return train, test if test is not None else train


def cmd_eval(args, cfg):
    train, test = _dataset_override(args, cfg)
    models, tcfg = _load_models(args, cfg, train)
    report = final_report(models, train, test, tcfg, args.knn_k, args.alignment_pairs, args.labels)
    print(json.dumps({k: _clean(v) for k, v in report.to_dict().items()}, sort_keys=True))
    return EXIT_OK


def cmd_infer_partition(args, cfg):
    train, _ = _dataset_override(args, cfg)
    models, tcfg = _load_models(args, cfg, train)
    tau = args.tau_asym if args.tau_asym is not None else tcfg.tau_asym
    K = args.max_size if args.max_size is not None else tcfg.max_subset
    probs = P.ensemble_proba(models, train.features)
    partition = D.infer_partition(probs, train.num_classes, tau, K, tcfg.partition_first_k_only)
    report = {"partition": partition.to_list(), "tau_asym": tau, "max_size": K,
              "single_subset": len(partition.subsets) == 1,
              "all_singletons": all(len(s) == 1 for s in partition.subsets)}
    planted = train.noise_meta.get("partition")
    if planted is not None:
        report["exact_match"] = partition == Dt.ClassPartition(planted)
    if report["single_subset"]:
        log.warning("inference fell back to a single subset holding every class")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "eval": cmd_eval, "infer-partition": cmd_infer_partition}


def build_parser():
    parser = argparse.ArgumentParser(prog="chimera", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override output.dir")
        p.add_argument("--knn-k", type=int, default=None)
        p.add_argument("--alignment-pairs", type=int, default=200)
        if name == "run":
            p.add_argument("--resume", nargs="?", const=True, default=None,
                           help="resume from the output checkpoint or the given file")
        if name in ("eval", "infer-partition"):
            p.add_argument("--checkpoint", default=None, help="defaults to <out>/final.npz")
            p.add_argument("--dataset", default=None, help="dataset file replacing the training set")
        if name == "eval":
            p.add_argument("--labels", choices=("noisy", "true"), default="noisy",
                           help="training labels used for the kNN vote")
        if name == "infer-partition":
            p.add_argument("--tau-asym", type=float, default=None)
            p.add_argument("--max-size", type=int, default=None)
    return parser


def _threads():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be at least 1")
    return n


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        n_threads = _threads()
        if args.knn_k is not None and args.knn_k < 1:
            raise ConfigError("--knn-k must be at least 1")
        if args.alignment_pairs < 1:
            raise ConfigError("--alignment-pairs must be at least 1")
        cfg = load_config(args.config, args.seed, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=n_threads) if n_threads else nullcontext():
            return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # every runtime failure maps to one exit code
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
