"""Graph data model, Spurious-Motif generator, JSONL ingestion and batching.

Graphs are undirected but stored with both edge directions materialized.
The synthetic benchmark attaches a label-carrying motif (cycle / house /
crane) to a larger base shape (tree / ladder / wheel) whose identity is
spuriously correlated with the label on the training split only.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

FEATURE_DIM = 8

BASE_NAMES = ("tree", "ladder", "wheel")
MOTIF_NAMES = ("cycle", "house", "crane")


class DataError(Exception):
    pass


@dataclass
class Graph:
    num_nodes: int
    edges: np.ndarray          # (E, 2) int64, both directions present
    features: np.ndarray       # (num_nodes, d) float64
    label: int
    meta: dict | None = None

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.shape[0] != self.num_nodes:
            raise DataError(
                f"feature rows {self.features.shape[0]} != num_nodes {self.num_nodes}")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= self.num_nodes):
            raise DataError("edge endpoint out of range")
        if self.edges.size and np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise DataError("self-loops are not stored")
        if self.edges.size:
            fwd = set(map(tuple, self.edges))
            if any((v, u) not in fwd for u, v in fwd):
                raise DataError("directed edge missing its reverse")

    def undirected_pairs(self):
        """Canonical (u < v) pairs in lexicographic order."""
        if self.edges.size == 0:
            return np.empty((0, 2), dtype=np.int64)
        lo = np.minimum(self.edges[:, 0], self.edges[:, 1])
        hi = np.maximum(self.edges[:, 0], self.edges[:, 1])
        pairs = np.unique(np.stack([lo, hi], axis=1), axis=0)
        return pairs


def symmetrize(pairs) -> np.ndarray:
    """Expand undirected pairs to both directions, deduplicated."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size == 0:
        return pairs
    both = np.concatenate([pairs, pairs[:, ::-1]], axis=0)
    return np.unique(both, axis=0)


@dataclass
class SpMotifConfig:
    num_graphs: int = 3000
    bias: float = 0.9
    seed: int = 0
    train_frac: float = 0.8
    val_frac: float = 0.1

    def validate(self):
        errors = []
        if self.num_graphs < 1:
            errors.append("num_graphs must be >= 1")
        if not (1.0 / 3.0 - 1e-9 <= self.bias < 1.0):
            errors.append(f"bias must lie in [1/3, 1), got {self.bias}")
        if not (0 < self.train_frac < 1 and 0 <= self.val_frac < 1
                and self.train_frac + self.val_frac < 1):
            errors.append("train/val fractions must leave room for a test split")
        if errors:
            raise DataError("; ".join(errors))


@dataclass
class Dataset:
    graphs: list
    splits: dict = field(default_factory=dict)   # name -> list of indices
    num_classes: int = 0
    feature_dim: int = 0

    def split_indices(self, name):
        if name not in self.splits or not self.splits[name]:
            raise DataError(f"split {name!r} is empty or missing")
        return self.splits[name]

    def __len__(self):
        return len(self.graphs)


# ---------------------------------------------------------------------------
# shape library
# ---------------------------------------------------------------------------

def _tree_base():
    # balanced binary tree of depth 3: 15 nodes
    pairs = [(i, 2 * i + 1) for i in range(7)] + [(i, 2 * i + 2) for i in range(7)]
    return pairs, 15


def _ladder_base():
    # 6 rungs, two rails of 6 nodes each
    pairs = []
    for i in range(5):
        pairs.append((i, i + 1))
        pairs.append((6 + i, 6 + i + 1))
    pairs += [(i, 6 + i) for i in range(6)]
    return pairs, 12


def _wheel_base():
    # hub node 0 plus a 12-cycle
    pairs = [(0, i) for i in range(1, 13)]
    pairs += [(i, i + 1) for i in range(1, 12)] + [(12, 1)]
    return pairs, 13


def _cycle_motif():
    pairs = [(i, (i + 1) % 6) for i in range(6)]
    return pairs, 6


def _house_motif():
    # square base 0-1-2-3 with roof apex 4 on edge (2,3)
    pairs = [(0, 1), (1, 2), (2, 3), (3, 0), (2, 4), (3, 4)]
    return pairs, 5


def _crane_motif():
    # 8-node crane: body square, neck, triangular head, tail
    pairs = [(0, 1), (1, 2), (2, 3), (3, 0),
             (3, 4), (4, 5), (5, 6), (6, 4), (1, 7)]
    return pairs, 8


_BASES = (_tree_base, _ladder_base, _wheel_base)
_MOTIFS = (_cycle_motif, _house_motif, _crane_motif)


def node_features_spmotif(num_nodes, edges, d_in: int = FEATURE_DIM) -> np.ndarray:
    """One-hot of min(degree, d_in - 1) per node; purely structural signal."""
    deg = np.zeros(num_nodes, dtype=np.int64)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size:
        np.add.at(deg, edges[:, 1], 1)
    feats = np.zeros((num_nodes, d_in), dtype=np.float64)
    feats[np.arange(num_nodes), np.minimum(deg, d_in - 1)] = 1.0
    return feats


def _build_spmotif_graph(s: int, c: int, rng: np.random.Generator) -> Graph:
    base_pairs, n_base = _BASES[s]()
    motif_pairs, n_motif = _MOTIFS[c]()
    pairs = list(base_pairs)
    pairs += [(u + n_base, v + n_base) for u, v in motif_pairs]
    bridge = (int(rng.integers(n_base)), n_base + int(rng.integers(n_motif)))
    pairs.append(bridge)
    n = n_base + n_motif
    edges = symmetrize(pairs)
    feats = node_features_spmotif(n, edges)
    return Graph(num_nodes=n, edges=edges, features=feats, label=c,
                 meta={"S": s, "C": c, "base_nodes": n_base})


def generate_spmotif(cfg: SpMotifConfig) -> Dataset:
    """Spurious-Motif benchmark with train-only base/motif correlation.

    On the training split the base shape S is sampled with
    P(S = C) = bias and P(S = other) = (1 - bias) / 2 each; val and test
    sample S uniformly. The label is always the motif class C.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.num_graphs
    n_train = int(round(cfg.train_frac * n))
    n_val = int(round(cfg.val_frac * n))
    split_of = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)

    graphs = []
    splits = {"train": [], "val": [], "test": []}
    for i in range(n):
        c = int(rng.integers(3))
        if split_of[i] == "train":
            if rng.random() < cfg.bias:
                s = c
            else:
                s = int((c + 1 + rng.integers(2)) % 3)
        else:
            s = int(rng.integers(3))
        graphs.append(_build_spmotif_graph(s, c, rng))
        splits[split_of[i]].append(i)
    return Dataset(graphs=graphs, splits=splits, num_classes=3,
                   feature_dim=FEATURE_DIM)


def dataset_stats(ds: Dataset) -> dict:
    """Class balance, per-split base/motif agreement, and size means."""
    stats = {"num_graphs": len(ds), "splits": {}}
    labels = np.array([g.label for g in ds.graphs])
    stats["class_frequency"] = {
        str(c): float(np.mean(labels == c)) for c in range(ds.num_classes)}
    stats["mean_nodes"] = float(np.mean([g.num_nodes for g in ds.graphs]))
    stats["mean_undirected_edges"] = float(
        np.mean([len(g.undirected_pairs()) for g in ds.graphs]))
    for name, idx in ds.splits.items():
        if not idx:
            continue
        sub = [ds.graphs[i] for i in idx]
        entry = {"size": len(idx)}
        if all(g.meta and "S" in g.meta for g in sub):
            agree = np.mean([g.meta["S"] == g.meta["C"] for g in sub])
            entry["p_base_equals_motif"] = float(agree)
        stats["splits"][name] = entry
    return stats


# ---------------------------------------------------------------------------
# JSONL ingestion / persistence
# ---------------------------------------------------------------------------

def load_jsonl(path) -> Dataset:
    """One JSON object per line: num_nodes, edges (undirected pairs listed
    once), features, label, split, optional meta. Edges are symmetrized."""
    graphs = []
    splits = {"train": [], "val": [], "test": []}
    max_label = -1
    feature_dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"line {lineno}: invalid JSON ({e})") from None
            for key in ("num_nodes", "edges", "features", "label", "split"):
                if key not in obj:
                    raise DataError(f"line {lineno}: missing key {key!r}")
            n = int(obj["num_nodes"])
            feats = obj["features"]
            if len(feats) != n or (feats and any(len(r) != len(feats[0]) for r in feats)):
                raise DataError(f"line {lineno}: features must be {n} equal-length rows")
            pairs = np.asarray(obj["edges"], dtype=np.int64).reshape(-1, 2)
            if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
                raise DataError(f"line {lineno}: edge endpoint out of range for "
                                f"num_nodes={n}")
            if obj["split"] not in splits:
                raise DataError(f"line {lineno}: split must be train/val/test")
            try:
                g = Graph(num_nodes=n, edges=symmetrize(pairs),
                          features=np.asarray(feats, dtype=np.float64),
                          label=int(obj["label"]), meta=obj.get("meta"))
            except DataError as e:
                raise DataError(f"line {lineno}: {e}") from None
            if feature_dim is None:
                feature_dim = g.features.shape[1]
            elif g.features.shape[1] != feature_dim:
                raise DataError(f"line {lineno}: feature dim {g.features.shape[1]} "
                                f"!= {feature_dim}")
            splits[obj["split"]].append(len(graphs))
            graphs.append(g)
            max_label = max(max_label, g.label)
    if not graphs:
        warnings.warn(f"{path}: empty dataset")
        return Dataset(graphs=[], splits=splits, num_classes=0, feature_dim=0)
    return Dataset(graphs=graphs, splits=splits, num_classes=max_label + 1,
                   feature_dim=feature_dim)


def save_jsonl(ds: Dataset, path):
    split_of = {}
    for name, idx in ds.splits.items():
        for i in idx:
            split_of[i] = name
    with open(path, "w", encoding="utf-8") as fh:
        for i, g in enumerate(ds.graphs):
            obj = {
                "num_nodes": g.num_nodes,
                "edges": g.undirected_pairs().tolist(),
                "features": g.features.tolist(),
                "label": g.label,
                "split": split_of.get(i, "train"),
            }
            if g.meta is not None:
                obj["meta"] = g.meta
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

class GraphBatch:
    """Block-diagonal merge of a list of graphs.

    Edges of each graph occupy a contiguous slice of the merged edge list,
    with node indices shifted by per-graph offsets.
    """

    def __init__(self, graphs, indices=None):
        if not graphs:
            raise DataError("cannot batch zero graphs")
        self.graphs = list(graphs)
        self.indices = list(indices) if indices is not None else list(range(len(graphs)))
        counts = np.array([g.num_nodes for g in graphs], dtype=np.int64)
        self.node_counts = counts
        self.node_offsets = np.concatenate([[0], np.cumsum(counts)])
        self.num_nodes = int(self.node_offsets[-1])
        self.num_graphs = len(graphs)
        self.features = np.concatenate([g.features for g in graphs], axis=0)
        self.labels = np.array([g.label for g in graphs], dtype=np.int64)
        self.graph_ids = np.repeat(np.arange(self.num_graphs), counts)

        edge_chunks = []
        edge_counts = []
        for g, off in zip(graphs, self.node_offsets[:-1]):
            edge_chunks.append(g.edges + off)
            edge_counts.append(len(g.edges))
        self.edges = (np.concatenate(edge_chunks, axis=0) if sum(edge_counts)
                      else np.empty((0, 2), dtype=np.int64))
        self.edge_offsets = np.concatenate([[0], np.cumsum(edge_counts)])
        self.src = self.edges[:, 0]
        self.dst = self.edges[:, 1]
        self.edge_graph_ids = np.repeat(np.arange(self.num_graphs),
                                        np.asarray(edge_counts, dtype=np.int64))
        self._reverse_index = None

    @property
    def reverse_index(self):
        """reverse_index[e] = index of the opposite-direction edge of e."""
        if self._reverse_index is None:
            lookup = {(int(u), int(v)): i for i, (u, v) in enumerate(self.edges)}
            rev = np.empty(len(self.edges), dtype=np.int64)
            for i, (u, v) in enumerate(self.edges):
                try:
                    rev[i] = lookup[(int(v), int(u))]
                except KeyError:
                    raise DataError(f"edge ({u},{v}) lacks its reverse") from None
            self._reverse_index = rev
        return self._reverse_index

    def with_self_loops(self, src=None, dst=None):
        """Append one self-loop per node to the given edge arrays."""
        if src is None:
            src, dst = self.src, self.dst
        loops = np.arange(self.num_nodes, dtype=np.int64)
        return np.concatenate([src, loops]), np.concatenate([dst, loops])

    def unbatch(self):
        out = []
        for g, lo, hi, elo, ehi in zip(self.graphs, self.node_offsets[:-1],
                                       self.node_offsets[1:], self.edge_offsets[:-1],
                                       self.edge_offsets[1:]):
            out.append(Graph(num_nodes=hi - lo,
                             edges=self.edges[elo:ehi] - lo,
                             features=self.features[lo:hi],
                             label=g.label,
                             meta=g.meta))
        return out


def make_batches(dataset: Dataset, split: str, batch_size: int, seed: int = 0,
                 epoch: int = 0, shuffle: bool | None = None):
    """Batches over a split; training order is shuffled by (seed, epoch),
    eval order is stable. The last partial batch is kept."""
    if batch_size < 2:
        raise DataError("batch_size must be >= 2 (interventions need a pool)")
    idx = list(dataset.split_indices(split))
    if shuffle is None:
        shuffle = split == "train"
    if shuffle:
        rng = np.random.default_rng([seed, epoch, 0x5bda])
        order = rng.permutation(len(idx))
        idx = [idx[i] for i in order]
    batches = []
    for lo in range(0, len(idx), batch_size):
        chunk = idx[lo:lo + batch_size]
        batches.append(GraphBatch([dataset.graphs[i] for i in chunk], indices=chunk))
    return batches
