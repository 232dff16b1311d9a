import numpy as np
import pytest

from carnas.data import Graph, GraphBatch, node_features_spmotif, symmetrize


def chain_graph(rng, n, label, extra_edges=2):
    """Path graph with a few random chords; features are degree one-hots."""
    pairs = [(i, i + 1) for i in range(n - 1)]
    for u, v in rng.integers(0, n, size=(extra_edges, 2)):
        if u != v:
            pairs.append((min(u, v), max(u, v)))
    edges = symmetrize(pairs)
    return Graph(n, edges, node_features_spmotif(n, edges), label)


@pytest.fixture
def small_batch():
    rng = np.random.default_rng(2)
    return GraphBatch([chain_graph(rng, 6, 0), chain_graph(rng, 8, 2)])
