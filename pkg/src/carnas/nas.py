"""Architecture customization: prototype bank, per-graph mixture
coefficients, the differentiable supernet and its two regularizers."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .gnn import OPERATORS, OperatorKind, init_linear, init_operator, linear, op_forward, readout_mean

NUM_OPERATORS = len(OPERATORS)


class PrototypeBank:
    """K x |O| trainable prototype vectors; row k scores the operators of
    supernet layer k against a graph embedding."""

    def __init__(self, store: ParamStore, prefix, num_layers, dim, rng):
        self.store = store
        self.prefix = prefix
        self.num_layers = num_layers
        self.dim = dim
        for k in range(num_layers):
            store.add(f"{prefix}.layer{k}", rng.uniform(-0.1, 0.1, size=(NUM_OPERATORS, dim)))

    def layer(self, k) -> Tensor:
        return self.store[f"{self.prefix}.layer{k}"]


def arch_coefficients(bank: PrototypeBank, h: Tensor):
    """Row-stochastic mixture coefficients: softmax over operators of the
    prototype/embedding inner products, one (M x |O|) matrix per layer."""
    if h.shape[1] != bank.dim:
        raise ad.ShapeMismatch(
            f"embedding dim {h.shape[1]} != prototype dim {bank.dim}")
    return [ad.softmax_rows(ad.matmul(h, ad.transpose(bank.layer(k))))
            for k in range(bank.num_layers)]


def arch_matrices(alphas) -> np.ndarray:
    """Detached (M, K, |O|) array of per-graph architecture matrices."""
    return np.stack([a.data for a in alphas], axis=1)


# ---------------------------------------------------------------------------
# supernet
# ---------------------------------------------------------------------------

def init_supernet(store: ParamStore, prefix, d_in, d_hidden, num_layers,
                  num_classes, rng, task="multiclass"):
    for k in range(num_layers):
        din = d_in if k == 0 else d_hidden
        for kind in OPERATORS:
            init_operator(store, f"{prefix}.layer{k}.{kind.name.lower()}",
                          kind, din, d_hidden, rng)
    out_dim = 1 if task == "binary" else num_classes
    init_linear(store, f"{prefix}.out", d_hidden, out_dim, rng)


def supernet_forward(store: ParamStore, prefix, batch, x: Tensor, alphas,
                     num_layers) -> Tensor:
    """Mixed-operator forward over the full graph.

    ``alphas``: list of K (num_graphs x |O|) arrays or Tensors on the
    probability simplex. Per layer, all six operators run once on the whole
    batch and each graph's node rows are combined with that graph's
    coefficients. Returns per-graph logits.
    """
    z = x
    for k in range(num_layers):
        alpha = alphas[k] if isinstance(alphas[k], Tensor) else Tensor(alphas[k])
        _check_simplex(alpha.data)
        mixed = None
        for u, kind in enumerate(OPERATORS):
            out = op_forward(kind, store, f"{prefix}.layer{k}.{kind.name.lower()}",
                             batch, z)
            coef = ad.gather_rows(ad.slice_cols(alpha, u, u + 1), batch.graph_ids)
            term = ad.mul(out, coef)
            mixed = term if mixed is None else ad.add(mixed, term)
        z = mixed
    pooled = readout_mean(batch, z)
    return linear(store, f"{prefix}.out", pooled)


def pure_operator_forward(store: ParamStore, prefix, batch, x: Tensor,
                          kind: OperatorKind, num_layers) -> Tensor:
    """Single-operator path sharing the supernet's weights (mixture
    degeneracy reference)."""
    z = x
    for k in range(num_layers):
        z = op_forward(kind, store, f"{prefix}.layer{k}.{kind.name.lower()}", batch, z)
    pooled = readout_mean(batch, z)
    return linear(store, f"{prefix}.out", pooled)


def one_hot_alphas(kind: OperatorKind, num_layers, num_graphs):
    a = np.zeros((num_graphs, NUM_OPERATORS))
    a[:, kind.value] = 1.0
    return [a.copy() for _ in range(num_layers)]


def uniform_alphas(num_layers, num_graphs):
    a = np.full((num_graphs, NUM_OPERATORS), 1.0 / NUM_OPERATORS)
    return [a.copy() for _ in range(num_layers)]


def _check_simplex(a, tol=1e-8):
    if np.any(a < -tol) or np.any(np.abs(a.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("architecture coefficients must be row-stochastic")


# ---------------------------------------------------------------------------
# regularizers
# ---------------------------------------------------------------------------

def loss_op(bank: PrototypeBank) -> Tensor:
    """Sum over layers of cosine similarities over ordered operator pairs
    (u != u'); discourages prototype mode collapse."""
    total = None
    off_diag = 1.0 - np.eye(NUM_OPERATORS)
    for k in range(bank.num_layers):
        p = bank.layer(k)
        sq_norm = ad.row_sum(ad.mul(p, p))
        inv_norm = ad.reciprocal(ad.add(ad.sqrt(sq_norm), 1e-12))
        unit = ad.mul(p, inv_norm)
        cos = ad.matmul(unit, ad.transpose(unit))
        contrib = ad.sum_all(ad.mul(cos, off_diag))
        total = contrib if total is None else ad.add(total, contrib)
    return total


def loss_arch(alphas_v, group_ids, num_graphs) -> Tensor:
    """Variance regularizer over intervened architectures: per graph, the
    elementwise population variance of its candidate coefficient matrices,
    summed over entries and layers, then averaged over graphs."""
    group_ids = np.asarray(group_ids, dtype=np.int64)
    counts = np.bincount(group_ids, minlength=num_graphs)
    if counts.min() < 2:
        raise ValueError("variance needs at least 2 intervened matrices per graph")
    # shift each group by its first row: variance is shift invariant, and
    # identical candidates then give an exact zero instead of rounding dust
    _, first = np.unique(group_ids, return_index=True)
    total = None
    for alpha in alphas_v:
        d = ad.sub(alpha, ad.gather_rows(alpha, first[group_ids]))
        mean = ad.segment_mean(d, group_ids, num_graphs)
        dev = ad.sub(d, ad.gather_rows(mean, group_ids))
        var = ad.segment_mean(ad.mul(dev, dev), group_ids, num_graphs)
        contrib = ad.sum_all(var)
        total = contrib if total is None else ad.add(total, contrib)
    return ad.scale(total, 1.0 / num_graphs)
