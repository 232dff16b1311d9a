"""Message-passing operator zoo, disentangled encoder and readout.

The six operators share identical input/output dims at a given layer so
their outputs can be mixed by architecture coefficients. Every operator
ends with an elementwise ReLU.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor


class OperatorKind(Enum):
    GCN = 0
    GAT = 1
    GIN = 2
    SAGE = 3
    GRAPHCONV = 4
    MLP = 5


OPERATORS = tuple(OperatorKind)
OPERATOR_NAMES = tuple(k.name.lower() for k in OPERATORS)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# parameter registration
# ---------------------------------------------------------------------------

def init_linear(store: ParamStore, prefix, d_in, d_out, rng):
    store.add(f"{prefix}.weight", glorot(rng, d_in, d_out))
    # small nonzero bias keeps dead rows off the ReLU kink
    store.add(f"{prefix}.bias", rng.uniform(-0.01, 0.01, size=(1, d_out)))


def init_operator(store: ParamStore, prefix, kind: OperatorKind, d_in, d_out, rng):
    if kind in (OperatorKind.GCN, OperatorKind.MLP):
        init_linear(store, prefix, d_in, d_out, rng)
    elif kind is OperatorKind.GAT:
        init_linear(store, prefix, d_in, d_out, rng)
        store.add(f"{prefix}.att_src", glorot(rng, d_out, 1))
        store.add(f"{prefix}.att_dst", glorot(rng, d_out, 1))
    elif kind is OperatorKind.GIN:
        init_linear(store, f"{prefix}.mlp1", d_in, d_out, rng)
        init_linear(store, f"{prefix}.mlp2", d_out, d_out, rng)
    elif kind is OperatorKind.SAGE:
        init_linear(store, prefix, 2 * d_in, d_out, rng)
    elif kind is OperatorKind.GRAPHCONV:
        store.add(f"{prefix}.weight_self", glorot(rng, d_in, d_out))
        store.add(f"{prefix}.weight_nbr", glorot(rng, d_in, d_out))
        store.add(f"{prefix}.bias", rng.uniform(-0.01, 0.01, size=(1, d_out)))
    else:
        raise ValueError(f"unknown operator kind {kind}")


def linear(store, prefix, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, store[f"{prefix}.weight"]), store[f"{prefix}.bias"])


# ---------------------------------------------------------------------------
# message-passing cores
# ---------------------------------------------------------------------------

def gcn_propagate(store, prefix, num_nodes, src, dst, x: Tensor,
                  edge_weight: Tensor | None = None) -> Tensor:
    """Symmetric-normalized propagation with self-loops (pre-activation).

    Optional per-edge weights multiply the messages (value-attached) and
    enter the weighted degrees, so both the message and normalization paths
    carry gradient into the scorer. Self loops always weigh 1, keeping the
    weighted degrees >= 1.
    """
    h = linear(store, prefix, x)
    loops = np.arange(num_nodes, dtype=np.int64)
    src_l = np.concatenate([src, loops])
    dst_l = np.concatenate([dst, loops])

    if edge_weight is not None:
        ones = Tensor(np.ones((num_nodes, 1)))
        w_full = ad.concat_rows([edge_weight, ones])
        deg = ad.scatter_sum(w_full, dst_l, num_nodes)
        norm = ad.reciprocal(ad.sqrt(ad.mul(ad.gather_rows(deg, src_l),
                                            ad.gather_rows(deg, dst_l))))
        msg = ad.mul(ad.mul(ad.gather_rows(h, src_l), norm), w_full)
    else:
        deg = np.zeros(num_nodes)
        np.add.at(deg, dst_l, np.ones(len(dst_l)))
        norm = (1.0 / np.sqrt(deg[src_l] * deg[dst_l]))[:, None]
        msg = ad.mul(ad.gather_rows(h, src_l), norm)
    return ad.scatter_sum(msg, dst_l, num_nodes)


def _neighbor_sum(num_nodes, src, dst, x: Tensor) -> Tensor:
    return ad.scatter_sum(ad.gather_rows(x, src), dst, num_nodes)


def op_forward(kind: OperatorKind, store: ParamStore, prefix, batch, x: Tensor) -> Tensor:
    """Run one search-space operator on the batch; ReLU applied at the end."""
    n = batch.num_nodes
    src, dst = batch.src, batch.dst
    if kind is OperatorKind.GCN:
        out = gcn_propagate(store, prefix, n, src, dst, x)
    elif kind is OperatorKind.GAT:
        out = _gat_forward(store, prefix, batch, x)
    elif kind is OperatorKind.GIN:
        agg = ad.add(x, _neighbor_sum(n, src, dst, x))
        hidden = ad.relu(linear(store, f"{prefix}.mlp1", agg))
        out = linear(store, f"{prefix}.mlp2", hidden)
    elif kind is OperatorKind.SAGE:
        mean_nbr = ad.segment_mean(ad.gather_rows(x, src), dst, n)
        out = linear(store, prefix, ad.concat_cols([x, mean_nbr]))
    elif kind is OperatorKind.GRAPHCONV:
        out = ad.add(
            ad.add(ad.matmul(x, store[f"{prefix}.weight_self"]),
                   ad.matmul(_neighbor_sum(n, src, dst, x), store[f"{prefix}.weight_nbr"])),
            store[f"{prefix}.bias"])
    elif kind is OperatorKind.MLP:
        out = linear(store, prefix, x)
    else:
        raise ValueError(f"unknown operator kind {kind}")
    return ad.relu(out)


def _gat_forward(store, prefix, batch, x: Tensor) -> Tensor:
    """Single-head attention over in-neighbors plus self."""
    n = batch.num_nodes
    src, dst = batch.with_self_loops()
    h = linear(store, prefix, x)
    e_src = ad.matmul(h, store[f"{prefix}.att_src"])
    e_dst = ad.matmul(h, store[f"{prefix}.att_dst"])
    scores = ad.leaky_relu(
        ad.add(ad.gather_rows(e_src, src), ad.gather_rows(e_dst, dst)), slope=0.2)
    # per-destination softmax, stabilized by the segment max (a constant
    # shift per segment leaves both value and gradient unchanged)
    seg_max = np.full(n, -np.inf)
    np.maximum.at(seg_max, dst, scores.data.reshape(-1))
    shifted = ad.sub(scores, seg_max[dst][:, None])
    num = ad.exp(shifted)
    denom = ad.scatter_sum(num, dst, n)
    alpha = ad.mul(num, ad.reciprocal(ad.gather_rows(denom, dst)))
    return ad.scatter_sum(ad.mul(ad.gather_rows(h, src), alpha), dst, n)


def gat_attention_rows(store, prefix, batch, x: Tensor):
    """Attention weights per self-loop-augmented edge (for invariant tests)."""
    n = batch.num_nodes
    src, dst = batch.with_self_loops()
    h = linear(store, prefix, x)
    e = ad.leaky_relu(ad.add(ad.gather_rows(ad.matmul(h, store[f"{prefix}.att_src"]), src),
                             ad.gather_rows(ad.matmul(h, store[f"{prefix}.att_dst"]), dst)),
                      slope=0.2).data.reshape(-1)
    seg_max = np.full(n, -np.inf)
    np.maximum.at(seg_max, dst, e)
    num = np.exp(e - seg_max[dst])
    denom = np.zeros(n)
    np.add.at(denom, dst, num)
    return num / denom[dst], dst


# ---------------------------------------------------------------------------
# disentangled encoder
# ---------------------------------------------------------------------------

class DisentangledEncoder:
    """Multi-chunk GCN stack: at each layer, Q independent chunk GNNs run on
    their own slice of the previous layer's representation and outputs are
    concatenated (chunk q reads only chunk q; layer 1 reads raw features)."""

    def __init__(self, store: ParamStore, prefix, d_in, d_hidden, num_chunks,
                 num_layers, rng):
        if d_hidden % num_chunks != 0:
            raise ValueError(f"hidden dim {d_hidden} not divisible by Q={num_chunks}")
        self.store = store
        self.prefix = prefix
        self.num_chunks = num_chunks
        self.num_layers = num_layers
        self.chunk_dim = d_hidden // num_chunks
        self.d_hidden = d_hidden
        for layer in range(num_layers):
            din = d_in if layer == 0 else self.chunk_dim
            for q in range(num_chunks):
                init_linear(store, f"{prefix}.layer{layer}.chunk{q}", din,
                            self.chunk_dim, rng)

    def forward(self, batch, x: Tensor) -> Tensor:
        z = x
        for layer in range(self.num_layers):
            chunks = []
            for q in range(self.num_chunks):
                if layer == 0:
                    zin = z
                else:
                    zin = ad.slice_cols(z, q * self.chunk_dim, (q + 1) * self.chunk_dim)
                pre = gcn_propagate(self.store, f"{self.prefix}.layer{layer}.chunk{q}",
                                    batch.num_nodes, batch.src, batch.dst, zin)
                chunks.append(ad.relu(pre))
            z = ad.concat_cols(chunks)
        return z


def readout_mean(batch, z: Tensor) -> Tensor:
    """Global mean pooling: row g = mean of z rows belonging to graph g."""
    if np.any(batch.node_counts == 0):
        raise ValueError("cannot read out a graph with zero nodes")
    return ad.segment_mean(z, batch.graph_ids, batch.num_graphs)


def param_count(store: ParamStore, prefix: str = "") -> int:
    return store.count(prefix)
