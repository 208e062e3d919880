import json
import os
import subprocess
import sys

import numpy as np
import pytest
import yaml
from filelock import FileLock

from chimera import cli
from chimera import data as Dt
from chimera import pipeline as P

BASE = {
    "seed": 3,
    "dataset": {"num_classes": 4, "per_class": 40, "dim": 6, "separation": 4.0, "test_per_class": 10},
    "noise": {"kind": "asymmetric", "r": 0.3, "partition": "pairs"},
    "train": {"e_pre": 1, "e_w": 1, "e_semi": 2, "b1": 16, "b2": 8, "mode": "asym",
              "hidden": [16], "proj_hidden": 8, "proj_dim": 4},
    "output": {"dir": "out"},
}


def _write(tmp_path, cfg, name="cfg.yaml"):
    cfg = json.loads(json.dumps(cfg))
    cfg["output"]["dir"] = str(tmp_path / cfg["output"]["dir"])
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path), cfg


def _drop(cfg, dotted):
    cfg = json.loads(json.dumps(cfg))
    *head, last = dotted.split(".")
    node = cfg
    for h in head:
        node = node[h]
    del node[last]
    return cfg


def test_generate_is_deterministic_and_reports(tmp_path, capsys):
    path, cfg = _write(tmp_path, BASE)
    assert cli.main(["generate", "--config", path]) == 0
    out = capsys.readouterr().out
    assert "feasible=True" in out and "empirical confusion" in out
    first = (tmp_path / "out" / "train.ds").read_bytes()
    assert cli.main(["generate", "--config", path]) == 0
    assert (tmp_path / "out" / "train.ds").read_bytes() == first
    assert Dt.load_dataset(tmp_path / "out" / "test.ds").noise_ratio() == 0.0


def test_generate_r0_confusion_is_diagonal(tmp_path):
    cfg = json.loads(json.dumps(BASE))
    cfg["noise"] = {"kind": "symmetric", "r": 0.0}
    path, _ = _write(tmp_path, cfg)
    assert cli.main(["generate", "--config", path]) == 0
    ds = Dt.load_dataset(tmp_path / "out" / "train.ds")
    conf = Dt.empirical_confusion(ds)
    assert np.array_equal(conf, np.diag(np.diag(conf)))


@pytest.mark.parametrize("key", ["noise.kind", "noise.r", "output.dir", "dataset.dim", "dataset"])
def test_missing_required_key_exits_2_with_path(tmp_path, capsys, key):
    path, _ = _write(tmp_path, BASE)
    cfg = yaml.safe_load(open(path))
    with open(path, "w") as fh:
        yaml.safe_dump(_drop(cfg, key), fh)
    assert cli.main(["generate", "--config", path]) == 2
    assert key in capsys.readouterr().err


@pytest.mark.parametrize("patch", [{"extra": 1}, {"train": {"e_pre": 1, "learning": 3}},
                                   {"dataset": {"dim": "wide"}}, {"train": {"b1": 1}}])
def test_bad_configs_exit_2(tmp_path, patch):
    cfg = json.loads(json.dumps(BASE))
    for k, v in patch.items():
        if isinstance(v, dict) and k in cfg:
            cfg[k] = {**cfg[k], **v}
        else:
            cfg[k] = v
    path, _ = _write(tmp_path, cfg)
    assert cli.main(["run", "--config", path]) == 2


def test_unreadable_and_invalid_yaml(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "nope.yaml")]) == 2
    (tmp_path / "bad.yaml").write_text("a: [1, 2\n")
    assert cli.main(["run", "--config", str(tmp_path / "bad.yaml")]) == 2


def test_config_hash_stable_under_reordering():
    a = {"b": 1, "a": {"y": 2, "x": [1, 2]}}
    b = {"a": {"x": [1, 2], "y": 2}, "b": 1}
    assert cli.config_hash(a) == cli.config_hash(b)
    assert cli.config_hash(a) != cli.config_hash({**a, "b": 2})


def test_run_outputs_and_eval_consistency(tmp_path, capsys):
    path, cfg = _write(tmp_path, BASE)
    assert cli.main(["run", "--config", path]) == 0
    out = tmp_path / "out"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config_hash"] == cli.config_hash(cfg) and summary["run_id"].startswith(summary["config_hash"][:12])
    assert summary["version"].startswith("0.1.0")
    for key in ("test_accuracy", "auc", "alignment", "knn_accuracy"):
        assert key in summary["final"]
    rows = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    csv_lines = (out / "metrics.csv").read_text().splitlines()
    assert len(rows) == 4 and len(csv_lines) == 5 and csv_lines[0].startswith("stage,epoch")
    capsys.readouterr()
    assert cli.main(["eval", "--config", path]) == 0
    evaluated = json.loads(capsys.readouterr().out)
    assert evaluated == summary["final"]


def test_zero_epoch_run_has_baseline_summary(tmp_path):
    cfg = json.loads(json.dumps(BASE))
    cfg["train"].update(e_pre=0, e_w=0, e_semi=0)
    path, _ = _write(tmp_path, cfg)
    assert cli.main(["run", "--config", path]) == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["history_rows"] == 0 and 0 <= summary["final"]["test_accuracy"] <= 1


def test_seed_and_out_overrides(tmp_path):
    path, _ = _write(tmp_path, BASE)
    assert cli.main(["generate", "--config", path, "--seed", "11", "--out", str(tmp_path / "other")]) == 0
    a = (tmp_path / "other" / "train.ds").read_bytes()
    cli.main(["generate", "--config", path])
    assert a != (tmp_path / "out" / "train.ds").read_bytes()


def test_eval_knn_flags(tmp_path, capsys):
    path, _ = _write(tmp_path, BASE)
    assert cli.main(["run", "--config", path]) == 0
    assert cli.main(["generate", "--config", path]) == 0
    ds_path = tmp_path / "out" / "test.ds"
    cfg = yaml.safe_load(open(path))
    cfg["dataset"] = {"path": str(ds_path), "test_path": str(ds_path)}
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh)
    capsys.readouterr()
    assert cli.main(["eval", "--config", path, "--knn-k", "1", "--alignment-pairs", "5"]) == 0
    assert json.loads(capsys.readouterr().out)["knn_accuracy"] == 1.0
    assert cli.main(["eval", "--config", path, "--knn-k", "0"]) == 2


def test_eval_clean_vs_noisy_labels_mask_accounting(tmp_path, capsys):
    """With k=1 and train == test, kNN accuracy is the fraction of samples
    whose training label equals the true label."""
    path, cfg = _write(tmp_path, BASE)
    assert cli.main(["run", "--config", path]) == 0
    assert cli.main(["generate", "--config", path]) == 0
    train = Dt.load_dataset(tmp_path / "out" / "train.ds")
    Dt.save_dataset(train.with_labels(train.noisy_labels, train.noise_meta), tmp_path / "same.ds")
    cfg = yaml.safe_load(open(path))
    cfg["dataset"] = {"path": str(tmp_path / "same.ds"), "test_path": str(tmp_path / "same.ds")}
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh)
    capsys.readouterr()
    cli.main(["eval", "--config", path, "--knn-k", "1", "--labels", "true"])
    clean = json.loads(capsys.readouterr().out)["knn_accuracy"]
    cli.main(["eval", "--config", path, "--knn-k", "1", "--labels", "noisy"])
    noisy = json.loads(capsys.readouterr().out)["knn_accuracy"]
    assert clean == 1.0 and clean - noisy == pytest.approx(train.noise_ratio(), abs=1e-12)


def test_eval_architecture_mismatch_exits_3(tmp_path, capsys):
    path, _ = _write(tmp_path, BASE)
    assert cli.main(["run", "--config", path]) == 0
    cfg = yaml.safe_load(open(path))
    cfg["train"]["hidden"] = [12]
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh)
    capsys.readouterr()
    assert cli.main(["eval", "--config", path]) == 3
    assert "(6, 16)" in capsys.readouterr().err


def test_infer_partition_reports(tmp_path, capsys):
    path, _ = _write(tmp_path, BASE)
    assert cli.main(["run", "--config", path]) == 0
    capsys.readouterr()
    assert cli.main(["infer-partition", "--config", path]) == 0
    report = json.loads(capsys.readouterr().out)
    assert "exact_match" in report and report["tau_asym"] == 0.9
    assert cli.main(["infer-partition", "--config", path, "--tau-asym", "0.5", "--max-size", "1"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["max_size"] == 1


def test_infer_partition_untrained_single_subset_flag(tmp_path, capsys):
    cfg = json.loads(json.dumps(BASE))
    cfg["train"].update(e_pre=0, e_w=0, e_semi=0)
    path, _ = _write(tmp_path, cfg)
    assert cli.main(["run", "--config", path]) == 0
    capsys.readouterr()
    assert cli.main(["infer-partition", "--config", path, "--tau-asym", "0.999", "--max-size", "1"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["partition"] == [[0, 1, 2, 3]]
    assert report["single_subset"] is True and report["exact_match"] is False


def test_resume_continues_bit_exactly(tmp_path, monkeypatch):
    path, _ = _write(tmp_path, BASE)
    assert cli.main(["run", "--config", path, "--out", str(tmp_path / "full")]) == 0
    real = P.stage2_epoch
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 2:
            raise MemoryError("simulated crash")
        return real(*a, **k)

    monkeypatch.setattr(P, "stage2_epoch", flaky)
    assert cli.main(["run", "--config", path, "--out", str(tmp_path / "cut")]) == 3
    partial = (tmp_path / "cut" / "metrics.jsonl").read_text().splitlines()
    assert len(partial) == 3 and all(json.loads(line) for line in partial)
    monkeypatch.setattr(P, "stage2_epoch", real)
    assert cli.main(["run", "--config", path, "--out", str(tmp_path / "cut"), "--resume"]) == 0
    for name in ("metrics.jsonl", "metrics.csv"):
        assert (tmp_path / "cut" / name).read_bytes() == (tmp_path / "full" / name).read_bytes()
    a = json.loads((tmp_path / "full" / "summary.json").read_text())
    b = json.loads((tmp_path / "cut" / "summary.json").read_text())
    assert a["final"] == b["final"]


def test_resume_rejects_changed_config(tmp_path):
    path, _ = _write(tmp_path, BASE)
    assert cli.main(["run", "--config", path]) == 0
    cfg = yaml.safe_load(open(path))
    cfg["train"]["lr"] = 0.5
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh)
    assert cli.main(["run", "--config", path, "--resume"]) == 2


def test_lock_prevents_concurrent_runs(tmp_path):
    path, cfg = _write(tmp_path, BASE)
    os.makedirs(cfg["output"]["dir"], exist_ok=True)
    with FileLock(os.path.join(cfg["output"]["dir"], ".lock")):
        assert cli.main(["run", "--config", path]) == 3


def test_thread_env_validation(tmp_path, monkeypatch):
    path, _ = _write(tmp_path, BASE)
    monkeypatch.setenv(cli.THREADS_ENV, "zero")
    assert cli.main(["generate", "--config", path]) == 2
    monkeypatch.setenv(cli.THREADS_ENV, "2")
    assert cli.main(["generate", "--config", path]) == 0


def test_module_entry_point(tmp_path):
    path, _ = _write(tmp_path, BASE)
    proc = subprocess.run([sys.executable, "-m", "chimera", "generate", "--config", path],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "feasible" in proc.stdout


CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


@pytest.mark.slow
def test_desk_benchmark_config_meets_thresholds(tmp_path, capsys):
    path = os.path.join(CONFIGS, "desk_benchmark.yaml")
    assert cli.main(["run", "--config", path, "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["final"]["test_accuracy"] - summary["baseline_test_accuracy"] >= 0.10
    assert summary["final"]["auc"] >= 0.9
    capsys.readouterr()
    # a confident trained model with K=1 and a strict threshold gives singletons
    assert cli.main(["infer-partition", "--config", path, "--out", str(tmp_path),
                     "--tau-asym", "0.99", "--max-size", "1"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["all_singletons"] is True


@pytest.mark.slow
def test_desk_asym_warmup_recovers_planted_partition(tmp_path, capsys):
    # stop after warm-up: a model fit to the noisy labels spreads its mass over
    # each planted pair, which is what the inference reads
    cfg = yaml.safe_load(open(os.path.join(CONFIGS, "desk_asym.yaml")))
    cfg["train"]["e_semi"] = 0
    path = str(tmp_path / "asym.yaml")
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh)
    assert cli.main(["run", "--config", path, "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    assert cli.main(["infer-partition", "--config", path, "--out", str(tmp_path)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["exact_match"] is True
