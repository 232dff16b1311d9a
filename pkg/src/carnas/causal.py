"""Causal subgraph identification, subgraph encoding and interventions.

Edges are scored by an MLP over endpoint representations, symmetrized so
both directions of an undirected pair carry the same score, and split into
a causal set (per-graph top-t undirected pairs) and its complement. The
hard split is non-differentiable; the scorer trains through the
score-weighted messages of the subgraph encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .gnn import gcn_propagate, init_linear, linear, readout_mean


def init_edge_scorer(store: ParamStore, prefix, d_node, rng):
    init_linear(store, f"{prefix}.hidden", 2 * d_node, d_node, rng)
    init_linear(store, f"{prefix}.out", d_node, 1, rng)


def score_edges(store: ParamStore, prefix, batch, z: Tensor) -> Tensor:
    """Per directed edge: sigmoid(MLP([z_u || z_v])), then direction-averaged
    so paired edges (u,v) and (v,u) carry equal scores."""
    feats = ad.concat_cols([ad.gather_rows(z, batch.src), ad.gather_rows(z, batch.dst)])
    hidden = ad.relu(linear(store, f"{prefix}.hidden", feats))
    raw = ad.sigmoid(linear(store, f"{prefix}.out", hidden))
    return ad.scale(ad.add(raw, ad.gather_rows(raw, batch.reverse_index)), 0.5)


@dataclass
class CausalSplit:
    """Partition of a batch's directed edges into causal / non-causal sets."""
    causal_mask: np.ndarray      # bool over directed edges
    spurious_mask: np.ndarray
    scores: np.ndarray           # detached symmetric scores per directed edge
    t: float
    causal_pairs_per_graph: np.ndarray
    empty_graphs: np.ndarray     # graphs with zero edges, flagged


def _canonical_pairs(batch, graph_index):
    """Canonical undirected pairs of one graph: lexicographically sorted
    (u, v) with u < v, each mapped to its two directed edge indices."""
    lo, hi = batch.edge_offsets[graph_index], batch.edge_offsets[graph_index + 1]
    pairs = {}
    for e in range(lo, hi):
        u, v = int(batch.src[e]), int(batch.dst[e])
        key = (min(u, v), max(u, v))
        pairs.setdefault(key, []).append(e)
    return sorted(pairs.items())


def select_topt(scores, batch, t: float) -> CausalSplit:
    """Per graph, keep the ceil(t * m) highest-scoring undirected pairs
    (m = pair count); ties broken by smaller canonical pair index."""
    if not (0.0 < t <= 1.0):
        raise ValueError(f"t must lie in (0, 1], got {t}")
    scores = scores.data.reshape(-1) if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64).reshape(-1)
    causal = np.zeros(len(batch.edges), dtype=bool)
    n_pairs = np.zeros(batch.num_graphs, dtype=np.int64)
    empty = np.zeros(batch.num_graphs, dtype=bool)
    for g in range(batch.num_graphs):
        items = _canonical_pairs(batch, g)
        if not items:
            empty[g] = True
            continue
        pair_scores = np.array([scores[edges[0]] for _, edges in items])
        keep = math.ceil(t * len(items))
        # stable sort on -score keeps canonical order among ties
        chosen = np.argsort(-pair_scores, kind="stable")[:keep]
        n_pairs[g] = keep
        for c in chosen:
            for e in items[c][1]:
                causal[e] = True
    return CausalSplit(causal_mask=causal, spurious_mask=~causal,
                       scores=scores.copy(), t=t, causal_pairs_per_graph=n_pairs,
                       empty_graphs=empty)


def encode_subgraphs(store: ParamStore, prefix, batch, x: Tensor,
                     scores: Tensor, split: CausalSplit, num_layers: int = 2):
    """Shared two-pass encoder: the same GCN weights run once over the causal
    edges and once over the non-causal edges (all nodes retained). Retained
    messages are weighted by their differentiable scores so the scorer stays
    trainable through the hard split."""
    h_per_set = []
    for mask in (split.causal_mask, split.spurious_mask):
        idx = np.nonzero(mask)[0]
        src, dst = batch.src[idx], batch.dst[idx]
        w = ad.gather_rows(scores, idx) if len(idx) else Tensor(np.zeros((0, 1)))
        z = x
        for layer in range(num_layers):
            z = ad.relu(gcn_propagate(store, f"{prefix}.layer{layer}",
                                      batch.num_nodes, src, dst, z, edge_weight=w))
        h_per_set.append(readout_mean(batch, z))
    return h_per_set[0], h_per_set[1]


def init_subgraph_encoder(store: ParamStore, prefix, d_in, d_hidden, num_layers, rng):
    for layer in range(num_layers):
        init_linear(store, f"{prefix}.layer{layer}",
                    d_in if layer == 0 else d_hidden, d_hidden, rng)


# ---------------------------------------------------------------------------
# losses over subgraph embeddings
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; stabilized by a constant row-max shift."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range for {c} classes")
    shifted = ad.sub(logits, logits.data.max(axis=1, keepdims=True))
    log_z = ad.log(ad.row_sum(ad.exp(shifted)))
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    true_logit = ad.row_sum(ad.mul(shifted, onehot))
    return ad.mean_all(ad.sub(log_z, true_logit))


def binary_logistic_loss(logit: Tensor, labels) -> Tensor:
    """Mean logistic loss on a single logit column; labels in {0, 1}."""
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    sign = 1.0 - 2.0 * labels  # +1 for label 0, -1 for label 1
    return ad.mean_all(ad.softplus(ad.mul(logit, sign)))


def causal_classify_loss(store: ParamStore, prefix, h_c: Tensor, labels,
                         task: str = "multiclass") -> Tensor:
    logits = linear(store, prefix, h_c)
    if task == "binary":
        return binary_logistic_loss(logits, labels)
    return cross_entropy(logits, labels)


# ---------------------------------------------------------------------------
# interventions
# ---------------------------------------------------------------------------

@dataclass
class InterventionSet:
    h_v: Tensor                 # (num_graphs * n_candidates, d) mixed embeddings
    candidates: np.ndarray      # indices into the batch's non-causal pool
    group_ids: np.ndarray       # graph id per h_v row
    mu: float


def intervene(h_c: Tensor, h_s: Tensor, n_candidates: int, mu: float,
              rng: np.random.Generator) -> InterventionSet:
    """Mix each graph's causal embedding with sampled non-causal embeddings:
    h_v[j] = (1 - mu) * h_c + mu * h_s[candidate j]."""
    num_graphs = h_c.shape[0]
    if num_graphs < 2:
        raise ValueError("interventions need a batch of at least 2 graphs")
    if n_candidates > num_graphs:
        raise ValueError(f"n_candidates={n_candidates} exceeds pool size {num_graphs}")
    cand = np.sort(rng.choice(num_graphs, size=n_candidates, replace=False))
    rep = np.repeat(np.arange(num_graphs), n_candidates)
    tile = np.tile(cand, num_graphs)
    h_v = ad.add(ad.scale(ad.gather_rows(h_c, rep), 1.0 - mu),
                 ad.scale(ad.gather_rows(h_s, tile), mu))
    return InterventionSet(h_v=h_v, candidates=cand, group_ids=rep, mu=mu)


def edge_score_dump(batch, split: CausalSplit):
    """Per-graph score / membership records for the inspect command."""
    records = []
    for g in range(batch.num_graphs):
        lo, hi = batch.edge_offsets[g], batch.edge_offsets[g + 1]
        off = batch.node_offsets[g]
        records.append({
            "graph_index": int(batch.indices[g]),
            "label": int(batch.labels[g]),
            "edges": [[int(batch.src[e] - off), int(batch.dst[e] - off)]
                      for e in range(lo, hi)],
            "scores": [float(split.scores[e]) for e in range(lo, hi)],
            "causal": [bool(split.causal_mask[e]) for e in range(lo, hi)],
        })
    return records
