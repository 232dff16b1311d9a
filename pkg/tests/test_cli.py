import csv
import hashlib
import json
import os

import numpy as np
import pytest

from carnas.cli import main


def run_cli(argv):
    return main(argv)


@pytest.fixture(scope="module")
def dataset_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("data") / "ds.jsonl"
    assert run_cli(["gen", "--bias", "0.6", "--num", "60", "--seed", "1",
                    "--out", str(p)]) == 0
    return p


TINY_FLAGS = ["--d0", "4", "--d1", "4", "--d-s", "4", "--q-chunks", "2",
              "--k-layers", "2", "--batch-size", "8", "--epochs", "2"]


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_gen_writes_dataset_and_stats(tmp_path):
    out = tmp_path / "d.jsonl"
    assert run_cli(["gen", "--bias", "0.9", "--num", "90", "--seed", "7",
                    "--out", str(out)]) == 0
    assert out.exists()
    stats = json.load(open(str(out)[:-6] + ".stats.json"))
    assert stats["num_graphs"] == 90
    frac = stats["splits"]["train"]["p_base_equals_motif"]
    assert frac == pytest.approx(0.9, abs=0.1)


def test_gen_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    args = ["gen", "--bias", "0.5", "--num", "40", "--seed", "3"]
    assert run_cli(args + ["--out", str(a)]) == 0
    assert run_cli(args + ["--out", str(b)]) == 0
    assert sha(a) == sha(b)


def test_gen_unbiased_stats(tmp_path):
    out = tmp_path / "u.jsonl"
    assert run_cli(["gen", "--bias", "0.334", "--num", "600", "--seed",
                    "2", "--out", str(out)]) == 0
    stats = json.load(open(str(out)[:-6] + ".stats.json"))
    frac = stats["splits"]["train"]["p_base_equals_motif"]
    assert frac == pytest.approx(1 / 3, abs=0.06)


def test_train_writes_summary(dataset_path, tmp_path):
    out = tmp_path / "runs"
    code = run_cli(["train", "--data", str(dataset_path), "--out", str(out),
                    "--seeds", "0", "1"] + TINY_FLAGS)
    assert code == 0
    summary = json.load(open(out / "run" / "summary.json"))
    assert set(summary["seeds"]) == {0, 1}
    acc = summary["metrics"]["accuracy"]
    assert "mean" in acc and "std" in acc and len(acc["values"]) == 2
    for seed in (0, 1):
        d = out / "run" / f"seed-{seed}"
        assert (d / "metrics.csv").exists()
        assert (d / "ckpt-final.bin").exists()
        assert (d / "manifest.json").exists()


def test_train_ablate_flag(dataset_path, tmp_path):
    out = tmp_path / "runs"
    code = run_cli(["ablate", "--data", str(dataset_path), "--out", str(out),
                    "--seeds", "0", "--ablate", "no-arch"] + TINY_FLAGS)
    assert code == 0
    manifest = json.load(open(out / "run" / "seed-0" / "manifest.json"))
    assert manifest["config"]["disable_arch_reg"] is True


def test_train_baseline_flag(dataset_path, tmp_path):
    out = tmp_path / "runs"
    code = run_cli(["train", "--data", str(dataset_path), "--out", str(out),
                    "--seeds", "0", "--baseline", "gcn"] + TINY_FLAGS)
    assert code == 0
    manifest = json.load(open(out / "run" / "seed-0" / "manifest.json"))
    assert manifest["config"]["arch_mode"] == "gcn"


def test_eval_checkpoint(dataset_path, tmp_path):
    out = tmp_path / "runs"
    assert run_cli(["train", "--data", str(dataset_path), "--out", str(out),
                    "--seeds", "0"] + TINY_FLAGS) == 0
    ckpt = out / "run" / "seed-0" / "ckpt-final.bin"
    result_path = tmp_path / "eval.json"
    assert run_cli(["eval", "--ckpt", str(ckpt), "--data", str(dataset_path),
                    "--split", "test", "--out", str(result_path)]) == 0
    first = json.load(open(result_path))
    assert run_cli(["eval", "--ckpt", str(ckpt), "--data", str(dataset_path),
                    "--split", "test", "--out", str(result_path)]) == 0
    assert json.load(open(result_path)) == first
    assert 0.0 <= first["accuracy"] <= 1.0


def test_inspect_exports(dataset_path, tmp_path):
    runs = tmp_path / "runs"
    assert run_cli(["train", "--data", str(dataset_path), "--out", str(runs),
                    "--seeds", "0"] + TINY_FLAGS) == 0
    ckpt = runs / "run" / "seed-0" / "ckpt-final.bin"
    out = tmp_path / "inspect"
    assert run_cli(["inspect", "--ckpt", str(ckpt), "--data",
                    str(dataset_path), "--out", str(out)]) == 0
    tables = sorted(out.glob("arch_class_*.csv"))
    assert len(tables) == 3
    for table in tables:
        rows = list(csv.DictReader(open(table)))
        by_layer = {}
        for r in rows:
            by_layer.setdefault(r["layer"], 0.0)
            by_layer[r["layer"]] += float(r["alpha"])
        for total in by_layer.values():
            assert total == pytest.approx(1.0, abs=1e-9)
    assert (out / "edge_scores.jsonl").exists()


def test_bad_config_exit_code(dataset_path, tmp_path):
    code = run_cli(["train", "--data", str(dataset_path), "--out",
                    str(tmp_path), "--epochs", "0", "--seeds", "0"])
    assert code == 1


def test_missing_data_exit_code(tmp_path):
    code = run_cli(["train", "--data", str(tmp_path / "absent.jsonl"),
                    "--out", str(tmp_path), "--seeds", "0"] + TINY_FLAGS)
    assert code == 1
