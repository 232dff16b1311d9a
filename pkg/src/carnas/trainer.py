"""Composite loss assembly, training loop, evaluation and persistence."""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import causal as ca
from . import nas
from .autodiff import ParamStore, Tensor
from .data import Dataset, make_batches
from .gnn import DisentangledEncoder, OPERATOR_NAMES, OperatorKind, readout_mean

CHECKPOINT_MAGIC = b"CRNS1"


class ConfigError(Exception):
    pass


class CheckpointError(Exception):
    pass


@dataclass
class TrainConfig:
    # causal split / intervention / regularizer weights (SPMotif defaults)
    t: float = 0.85
    mu: float = 0.26
    theta1: float = 0.36
    theta2: float = 0.010
    sigma_min: float = 0.1
    sigma_max: float = 0.7
    epochs: int = 100
    # dimensions
    q_chunks: int = 4
    d0: int = 16
    d1: int = 32
    d_s: int = 64
    k_layers: int = 3
    gnn0_layers: int = 2
    gnn1_layers: int = 2
    # optimization
    n_s: int = 0          # 0 means "use the batch size"
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    # ablations and variants
    disable_arch_reg: bool = False
    disable_cpred: bool = False
    fixed_sigma: bool = False
    arch_mode: str = "causal"   # causal | uniform | one of the operator names
    task: str = "multiclass"    # multiclass | binary

    def validate(self):
        errors = []
        if not (0.0 < self.t <= 1.0):
            errors.append(f"t must lie in (0, 1], got {self.t}")
        if not (0.0 <= self.mu <= 1.0):
            errors.append(f"mu must lie in [0, 1], got {self.mu}")
        if self.theta1 < 0 or self.theta2 < 0:
            errors.append("theta1 and theta2 must be >= 0")
        if not (0.0 <= self.sigma_min <= self.sigma_max <= 1.0):
            errors.append("need 0 <= sigma_min <= sigma_max <= 1")
        if self.epochs < 1:
            errors.append("epochs must be >= 1")
        if self.batch_size < 2:
            errors.append("batch_size must be >= 2")
        if self.d0 % self.q_chunks != 0:
            errors.append(f"d0={self.d0} not divisible by q_chunks={self.q_chunks}")
        if self.n_s < 0:
            errors.append("n_s must be >= 0 (0 selects the batch size)")
        if self.arch_mode not in ("causal", "uniform") + OPERATOR_NAMES:
            errors.append(f"unknown arch_mode {self.arch_mode!r}")
        if self.task not in ("multiclass", "binary"):
            errors.append(f"unknown task {self.task!r}")
        if self.lr < 0:
            errors.append("lr must be >= 0")
        if errors:
            raise ConfigError("; ".join(errors))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def sigma_at(p: int, cfg: TrainConfig) -> float:
    """Linearly growing objective mix; 1-indexed epoch p."""
    if not (1 <= p <= cfg.epochs):
        raise ValueError(f"epoch {p} outside [1, {cfg.epochs}]")
    if cfg.fixed_sigma:
        return (cfg.sigma_max + cfg.sigma_min) / 2.0
    return cfg.sigma_min + (p - 1) * (cfg.sigma_max - cfg.sigma_min) / cfg.epochs


def total_loss(l_pred: Tensor, l_cpred, l_arch, l_op, sigma: float,
               cfg: TrainConfig) -> Tensor:
    """sigma * L_pred + (1 - sigma) * (L_cpred + theta1*L_arch + theta2*L_op);
    ablation flags zero components before combination."""
    causal_part = None

    def acc(part, term):
        return term if part is None else ad.add(part, term)

    if not cfg.disable_cpred and l_cpred is not None:
        causal_part = acc(causal_part, l_cpred)
    if not cfg.disable_arch_reg and l_arch is not None:
        causal_part = acc(causal_part, ad.scale(l_arch, cfg.theta1))
    if l_op is not None:
        causal_part = acc(causal_part, ad.scale(l_op, cfg.theta2))
    out = ad.scale(l_pred, sigma)
    if causal_part is not None:
        out = ad.add(out, ad.scale(causal_part, 1.0 - sigma))
    return out


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class CarnasModel:
    """All trainable components wired over one ParamStore."""

    def __init__(self, cfg: TrainConfig, num_classes: int, feature_dim: int):
        cfg.validate()
        self.cfg = cfg
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.store = ParamStore()
        rng = np.random.default_rng([cfg.seed, 0xca12])
        self.is_causal = cfg.arch_mode == "causal"
        if self.is_causal:
            self.encoder = DisentangledEncoder(
                self.store, "gnn0", feature_dim, cfg.d0, cfg.q_chunks,
                cfg.gnn0_layers, rng)
            ca.init_edge_scorer(self.store, "scorer", cfg.d0, rng)
            ca.init_subgraph_encoder(self.store, "gnn1", feature_dim, cfg.d1,
                                     cfg.gnn1_layers, rng)
            phi_out = 1 if cfg.task == "binary" else num_classes
            self.store.add("phi.weight", rng.uniform(-0.1, 0.1, size=(cfg.d1, phi_out)))
            self.store.add("phi.bias", np.zeros((1, phi_out)))
            self.bank = nas.PrototypeBank(self.store, "proto", cfg.k_layers,
                                          cfg.d1, rng)
        nas.init_supernet(self.store, "supernet", feature_dim, cfg.d_s,
                          cfg.k_layers, num_classes, rng, task=cfg.task)

    # -- forward pieces ----------------------------------------------------

    def causal_pipeline(self, batch, x: Tensor):
        """GNN_0 -> edge scores -> top-t split -> shared encoding of both
        subgraphs. Returns (split, scores, h_c, h_s)."""
        z0 = self.encoder.forward(batch, x)
        scores = ca.score_edges(self.store, "scorer", batch, z0)
        split = ca.select_topt(scores.data, batch, self.cfg.t)
        h_c, h_s = ca.encode_subgraphs(self.store, "gnn1", batch, x, scores,
                                       split, num_layers=self.cfg.gnn1_layers)
        return split, scores, h_c, h_s

    def fixed_alphas(self, num_graphs):
        cfg = self.cfg
        if cfg.arch_mode == "uniform":
            return nas.uniform_alphas(cfg.k_layers, num_graphs)
        kind = OperatorKind[cfg.arch_mode.upper()]
        return nas.one_hot_alphas(kind, cfg.k_layers, num_graphs)

    def predict_logits(self, batch):
        """Prediction path only: architecture from the causal embedding (or
        the fixed baseline architecture), supernet on the full graph."""
        x = Tensor(batch.features)
        if self.is_causal:
            _, _, h_c, _ = self.causal_pipeline(batch, x)
            alphas = nas.arch_coefficients(self.bank, h_c)
        else:
            alphas = self.fixed_alphas(batch.num_graphs)
        return nas.supernet_forward(self.store, "supernet", batch, x, alphas,
                                    self.cfg.k_layers)

    def _pred_loss(self, logits, labels):
        if self.cfg.task == "binary":
            return ca.binary_logistic_loss(logits, labels)
        return ca.cross_entropy(logits, labels)

    def step_losses(self, batch, sigma: float, rng: np.random.Generator):
        """One Algorithm-1 step worth of loss components on a batch."""
        cfg = self.cfg
        x = Tensor(batch.features)
        components = {}
        if self.is_causal:
            _, _, h_c, h_s = self.causal_pipeline(batch, x)
            l_cpred = ca.causal_classify_loss(self.store, "phi", h_c,
                                              batch.labels, task=cfg.task)
            n_s = cfg.n_s if cfg.n_s else batch.num_graphs
            n_s = min(n_s, batch.num_graphs)
            l_arch = None
            if n_s >= 2 and batch.num_graphs >= 2 and not cfg.disable_arch_reg:
                iv = ca.intervene(h_c, h_s, n_s, cfg.mu, rng)
                alphas_v = nas.arch_coefficients(self.bank, iv.h_v)
                l_arch = nas.loss_arch(alphas_v, iv.group_ids, batch.num_graphs)
            l_op = nas.loss_op(self.bank)
            alphas = nas.arch_coefficients(self.bank, h_c)
        else:
            l_cpred = l_arch = l_op = None
            alphas = self.fixed_alphas(batch.num_graphs)
        logits = nas.supernet_forward(self.store, "supernet", batch, x, alphas,
                                      cfg.k_layers)
        l_pred = self._pred_loss(logits, batch.labels)
        l_all = total_loss(l_pred, l_cpred, l_arch, l_op, sigma, cfg)
        components["L_pred"] = float(l_pred.data)
        components["L_cpred"] = float(l_cpred.data) if l_cpred is not None else 0.0
        components["L_arch"] = float(l_arch.data) if l_arch is not None else 0.0
        components["L_op"] = float(l_op.data) if l_op is not None else 0.0
        components["L_all"] = float(l_all.data)
        components["sigma"] = sigma
        return l_all, components


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train_epoch(model: CarnasModel, dataset: Dataset, cfg: TrainConfig,
                epoch: int):
    """One pass over the training split in Algorithm-1 order; one combined
    backward + Adam step per batch. Returns the per-step component rows."""
    sigma = sigma_at(epoch, cfg)
    batches = make_batches(dataset, "train", cfg.batch_size, seed=cfg.seed,
                           epoch=epoch)
    rows = []
    for step, batch in enumerate(batches):
        rng = np.random.default_rng([cfg.seed, epoch, step, 0x1f2e])
        model.store.zero_grads()
        l_all, comp = model.step_losses(batch, sigma, rng)
        if not np.isfinite(comp["L_all"]):
            raise ad.NonFiniteError(
                f"non-finite loss at epoch {epoch} step {step}: {comp}")
        ad.backward(l_all)
        model.store.adam_step(cfg.lr)
        comp.update(epoch=epoch, step=step)
        rows.append(comp)
    return rows


def split_loss(model: CarnasModel, dataset: Dataset, split: str,
               batch_size: int = 64) -> float:
    """Mean prediction cross-entropy over a split (monitoring only)."""
    total, count = 0.0, 0
    for batch in make_batches(dataset, split, batch_size, shuffle=False):
        logits = model.predict_logits(batch)
        loss = model._pred_loss(logits, batch.labels)
        total += float(loss.data) * batch.num_graphs
        count += batch.num_graphs
    return total / count


def evaluate(model: CarnasModel, dataset: Dataset, split: str,
             batch_size: int = 64) -> dict:
    """Multiclass -> accuracy; binary -> ROC-AUC (ties counted half)."""
    logits_all, labels_all = [], []
    for batch in make_batches(dataset, split, batch_size, shuffle=False):
        logits_all.append(model.predict_logits(batch).data)
        labels_all.append(batch.labels)
    logits = np.concatenate(logits_all, axis=0)
    labels = np.concatenate(labels_all)
    if model.cfg.task == "binary":
        scores = 1.0 / (1.0 + np.exp(-logits.reshape(-1)))
        return {"roc_auc": roc_auc(labels, scores)}
    pred = logits.argmax(axis=1)
    return {"accuracy": float(np.mean(pred == labels))}


def roc_auc(labels, scores) -> float:
    """Rank-statistic AUC with average ranks for ties."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC undefined: split contains a single class")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: CarnasModel, epoch: int):
    """Versioned binary container: magic, JSON meta, then length-prefixed
    name/shape/data records in little-endian float64."""
    arrays = model.store.state_arrays()
    meta = {
        "version": 1,
        "epoch": epoch,
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.hash(),
        "num_classes": model.num_classes,
        "feature_dim": model.feature_dim,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Returns (meta, arrays). Raises CheckpointError on malformed files."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from None
    if blob[:5] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a CRNS1 checkpoint")
    try:
        off = 5
        (meta_len,) = struct.unpack_from("<I", blob, off); off += 4
        meta = json.loads(blob[off:off + meta_len]); off += meta_len
        (n_records,) = struct.unpack_from("<I", blob, off); off += 4
        arrays = {}
        for _ in range(n_records):
            (name_len,) = struct.unpack_from("<I", blob, off); off += 4
            name = blob[off:off + name_len].decode(); off += name_len
            (ndim,) = struct.unpack_from("<I", blob, off); off += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, off); off += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off)
            off += 8 * size
            arrays[name] = arr.reshape(shape).astype(np.float64)
        if off != len(blob):
            raise CheckpointError("trailing bytes after final record")
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"truncated or corrupt checkpoint: {e}") from None
    return meta, arrays


def restore_model(path, allow_config_mismatch=False,
                  expect_config: TrainConfig | None = None):
    meta, arrays = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    if expect_config is not None and expect_config.hash() != meta["config_hash"]:
        if not allow_config_mismatch:
            raise CheckpointError(
                "config hash mismatch; pass allow_config_mismatch to load anyway")
        cfg = expect_config
    model = CarnasModel(cfg, meta["num_classes"], meta["feature_dim"])
    model.store.load_state_arrays(arrays)
    return model, meta


# ---------------------------------------------------------------------------
# run orchestration
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    final_metric: dict
    epochs_run: int
    metrics_path: str
    checkpoint_path: str
    val_losses: list = field(default_factory=list)


def write_metrics_rows(writer, step_rows):
    for r in step_rows:
        writer.writerow([r["epoch"], r["step"],
                         repr(r["L_pred"]), repr(r["L_cpred"]), repr(r["L_arch"]),
                         repr(r["L_op"]), repr(r["sigma"]), repr(r["L_all"])])


def run_training(cfg: TrainConfig, dataset: Dataset, out_dir,
                 resume_from=None, stop_after=None,
                 log_test_each_epoch=False) -> RunResult:
    """Train for cfg.epochs, streaming metrics CSV and writing a final
    checkpoint. ``resume_from`` continues a previous run bit-for-bit;
    ``stop_after`` checkpoints early while keeping the full schedule."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    ckpt_path = os.path.join(out_dir, "ckpt-final.bin")

    if resume_from is not None:
        model, meta = restore_model(resume_from, expect_config=cfg)
        start_epoch = meta["epoch"]
        mode = "a"
    else:
        model = CarnasModel(cfg, dataset.num_classes, dataset.feature_dim)
        start_epoch = 0
        mode = "w"

    last_epoch = stop_after if stop_after is not None else cfg.epochs
    val_losses = []
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["epoch", "step", "L_pred", "L_cpred", "L_arch",
                             "L_op", "sigma", "L_all"])
        for epoch in range(start_epoch + 1, last_epoch + 1):
            rows = train_epoch(model, dataset, cfg, epoch)
            write_metrics_rows(writer, rows)
            mean_all = float(np.mean([r["L_all"] for r in rows]))
            writer.writerow([epoch, "train", "loss", repr(mean_all)])
            if dataset.splits.get("val"):
                vl = split_loss(model, dataset, "val")
                val_losses.append(vl)
                writer.writerow([epoch, "val", "loss", repr(vl)])
                vm = evaluate(model, dataset, "val")
                for name, value in vm.items():
                    writer.writerow([epoch, "val", name, repr(value)])
            if log_test_each_epoch and dataset.splits.get("test"):
                tm = evaluate(model, dataset, "test")
                for name, value in tm.items():
                    writer.writerow([epoch, "test", name, repr(value)])
        final_metric = {}
        if last_epoch == cfg.epochs and dataset.splits.get("test"):
            final_metric = evaluate(model, dataset, "test")
            for name, value in final_metric.items():
                writer.writerow([last_epoch, "test", name, repr(value)])
    save_checkpoint(ckpt_path, model, last_epoch)
    return RunResult(final_metric=final_metric, epochs_run=last_epoch - start_epoch,
                     metrics_path=metrics_path, checkpoint_path=ckpt_path,
                     val_losses=val_losses)
