import copy
import csv
import math
import os

import numpy as np
import pytest

from carnas import autodiff as ad
from carnas.autodiff import Tensor
from carnas.data import SpMotifConfig, generate_spmotif
from carnas.trainer import (CarnasModel, CheckpointError, ConfigError,
                            TrainConfig, load_checkpoint, restore_model,
                            roc_auc, run_training, save_checkpoint, sigma_at,
                            split_loss, total_loss, train_epoch, evaluate)

TINY = dict(d0=4, d1=4, d_s=4, q_chunks=2, k_layers=2, batch_size=8)


@pytest.fixture(scope="module")
def tiny_dataset():
    return generate_spmotif(SpMotifConfig(num_graphs=60, bias=0.6, seed=0))


# --- sigma schedule ----------------------------------------------------------

def test_sigma_first_epoch():
    cfg = TrainConfig(epochs=100)
    assert sigma_at(1, cfg) == pytest.approx(0.1)


def test_sigma_last_epoch():
    cfg = TrainConfig(epochs=100)
    assert sigma_at(100, cfg) == pytest.approx(0.694, abs=1e-12)


def test_sigma_fixed_midpoint():
    cfg = TrainConfig(epochs=100, fixed_sigma=True)
    for p in (1, 50, 100):
        assert sigma_at(p, cfg) == pytest.approx(0.4)


def test_sigma_rejects_out_of_range():
    cfg = TrainConfig(epochs=10)
    with pytest.raises(ValueError):
        sigma_at(0, cfg)
    with pytest.raises(ValueError):
        sigma_at(11, cfg)


# --- loss combination --------------------------------------------------------

def scalar(v):
    return Tensor(np.array([[float(v)]]))


def test_total_loss_hand_value():
    cfg = TrainConfig(theta1=0.36, theta2=0.01)
    out = total_loss(scalar(1.0), scalar(0.5), scalar(2.0), scalar(3.0), 0.4, cfg)
    assert out.data.item() == pytest.approx(1.15, abs=1e-12)


def test_total_loss_sigma_one_boundary():
    cfg = TrainConfig()
    out = total_loss(scalar(1.0), scalar(9.0), scalar(9.0), scalar(9.0), 1.0, cfg)
    assert out.data.item() == pytest.approx(1.0, abs=1e-12)


def test_total_loss_half_mix_no_thetas():
    cfg = TrainConfig(theta1=0.0, theta2=0.0)
    out = total_loss(scalar(1.0), scalar(0.5), scalar(7.0), scalar(7.0), 0.5, cfg)
    assert out.data.item() == pytest.approx(0.75, abs=1e-12)


def test_total_loss_ablations_zero_components():
    base = TrainConfig(theta1=0.36, theta2=0.0)
    out_full = total_loss(scalar(1.0), scalar(0.5), scalar(2.0), None, 0.5, base)
    no_arch = TrainConfig(theta1=0.36, theta2=0.0, disable_arch_reg=True)
    out_na = total_loss(scalar(1.0), scalar(0.5), scalar(2.0), None, 0.5, no_arch)
    assert out_full.data.item() > out_na.data.item()
    assert out_na.data.item() == pytest.approx(0.75, abs=1e-12)


# --- config validation -------------------------------------------------------

def test_config_validation_collects_all_errors():
    cfg = TrainConfig(t=0.0, mu=5.0, epochs=0, batch_size=1)
    with pytest.raises(ConfigError) as exc:
        cfg.validate()
    msg = str(exc.value)
    for needle in ("t ", "mu", "epochs", "batch_size"):
        assert needle in msg


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="nope"):
        TrainConfig.from_dict({"nope": 1})


def test_config_hash_stable_and_sensitive():
    a, b = TrainConfig(), TrainConfig()
    assert a.hash() == b.hash()
    assert a.hash() != TrainConfig(lr=2e-3).hash()


# --- evaluation metrics ------------------------------------------------------

def test_roc_auc_perfect():
    assert roc_auc([1, 0], [0.9, 0.1]) == 1.0


def test_roc_auc_inverted():
    assert roc_auc([1, 0], [0.1, 0.9]) == 0.0


def test_roc_auc_ties_half():
    assert roc_auc([1, 0], [0.5, 0.5]) == 0.5


# --- training loop behaviour -------------------------------------------------

def test_lr_zero_freezes_params(tiny_dataset):
    cfg = TrainConfig(epochs=1, lr=0.0, seed=0, **TINY)
    model = CarnasModel(cfg, tiny_dataset.num_classes, tiny_dataset.feature_dim)
    before = {n: model.store[n].data.copy() for n in model.store.names()}
    train_epoch(model, tiny_dataset, cfg, 1)
    for n in model.store.names():
        np.testing.assert_array_equal(model.store[n].data, before[n])


def test_same_seed_identical_streams(tiny_dataset):
    cfg = TrainConfig(epochs=2, seed=1, **TINY)
    rows = []
    for _ in range(2):
        model = CarnasModel(cfg, tiny_dataset.num_classes, tiny_dataset.feature_dim)
        out = []
        for epoch in (1, 2):
            out.extend(train_epoch(model, tiny_dataset, cfg, epoch))
        rows.append(out)
    assert rows[0] == rows[1]


def test_disable_arch_reg_matches_theta1_zero(tiny_dataset):
    """The ablation flag and theta1=0 produce identical parameter streams."""
    outs = []
    for kw in ({"disable_arch_reg": True}, {"theta1": 0.0}):
        cfg = TrainConfig(epochs=1, seed=2, **TINY, **kw)
        model = CarnasModel(cfg, tiny_dataset.num_classes,
                            tiny_dataset.feature_dim)
        train_epoch(model, tiny_dataset, cfg, 1)
        outs.append({n: model.store[n].data.copy() for n in model.store.names()})
    for n in outs[0]:
        np.testing.assert_array_equal(outs[0][n], outs[1][n])


def test_evaluate_untrained_near_chance(tiny_dataset):
    cfg = TrainConfig(epochs=1, seed=3, **TINY)
    model = CarnasModel(cfg, tiny_dataset.num_classes, tiny_dataset.feature_dim)
    acc = evaluate(model, tiny_dataset, "train")["accuracy"]
    assert 0.0 <= acc <= 1.0


# --- checkpointing -----------------------------------------------------------

def test_checkpoint_roundtrip_exact(tmp_path, tiny_dataset):
    cfg = TrainConfig(epochs=1, seed=4, **TINY)
    model = CarnasModel(cfg, tiny_dataset.num_classes, tiny_dataset.feature_dim)
    train_epoch(model, tiny_dataset, cfg, 1)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, model, 1)
    restored, meta = restore_model(path)
    assert meta["epoch"] == 1
    for n in model.store.names():
        np.testing.assert_array_equal(restored.store[n].data,
                                      model.store[n].data)


def test_checkpoint_corrupt_magic(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_checkpoint_truncated(tmp_path, tiny_dataset):
    cfg = TrainConfig(epochs=1, seed=5, **TINY)
    model = CarnasModel(cfg, tiny_dataset.num_classes, tiny_dataset.feature_dim)
    p = tmp_path / "ckpt.bin"
    save_checkpoint(p, model, 1)
    data = p.read_bytes()
    p.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_checkpoint_config_mismatch(tmp_path, tiny_dataset):
    cfg = TrainConfig(epochs=1, seed=6, **TINY)
    model = CarnasModel(cfg, tiny_dataset.num_classes, tiny_dataset.feature_dim)
    p = tmp_path / "ckpt.bin"
    save_checkpoint(p, model, 1)
    other = TrainConfig(epochs=1, seed=6, lr=5e-3, **TINY)
    with pytest.raises(CheckpointError):
        restore_model(p, expect_config=other)
    restored, _ = restore_model(p, expect_config=other,
                                allow_config_mismatch=True)
    assert restored is not None


# --- full runs / resume ------------------------------------------------------

def test_run_and_resume_bit_exact(tmp_path, tiny_dataset):
    cfg = TrainConfig(epochs=4, seed=7, **TINY)
    full = run_training(cfg, tiny_dataset, tmp_path / "full")
    part = run_training(cfg, tiny_dataset, tmp_path / "part", stop_after=2)
    resumed = run_training(cfg, tiny_dataset, tmp_path / "resumed",
                           resume_from=part.checkpoint_path)
    full_model, _ = restore_model(full.checkpoint_path)
    res_model, _ = restore_model(resumed.checkpoint_path)
    for n in full_model.store.names():
        np.testing.assert_array_equal(full_model.store[n].data,
                                      res_model.store[n].data)
    assert full.final_metric == resumed.final_metric


def test_metrics_csv_schema(tmp_path, tiny_dataset):
    cfg = TrainConfig(epochs=2, seed=8, **TINY)
    res = run_training(cfg, tiny_dataset, tmp_path / "run")
    with open(res.metrics_path) as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    assert header == ["epoch", "step", "L_pred", "L_cpred", "L_arch",
                      "L_op", "sigma", "L_all"]
    step_rows = [r for r in rows[1:] if len(r) == 8]
    summary_rows = [r for r in rows[1:] if len(r) == 4]
    assert step_rows and summary_rows
    assert any(r[1] == "val" and r[2] == "loss" for r in summary_rows)


def test_training_loss_decreases(tiny_dataset):
    cfg = TrainConfig(epochs=6, seed=9, lr=5e-3, **TINY)
    model = CarnasModel(cfg, tiny_dataset.num_classes, tiny_dataset.feature_dim)
    first = train_epoch(model, tiny_dataset, cfg, 1)
    for epoch in range(2, 7):
        last = train_epoch(model, tiny_dataset, cfg, epoch)
    assert np.mean([r["L_pred"] for r in last]) < np.mean(
        [r["L_pred"] for r in first])
