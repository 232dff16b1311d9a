"""Sklearn-style estimator facade over the causal-aware NAS model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .data import DataError, Dataset, Graph, make_batches
from .trainer import CarnasModel, TrainConfig, evaluate, sigma_at, train_epoch


def check_graphs(X):
    """Validate an iterable of Graph instances and return it as a list."""
    graphs = list(X)
    if not graphs:
        raise DataError("empty graph collection")
    dims = set()
    for i, g in enumerate(graphs):
        if not isinstance(g, Graph):
            raise DataError(f"item {i} is not a Graph (got {type(g).__name__})")
        dims.add(g.features.shape[1])
    if len(dims) != 1:
        raise DataError(f"inconsistent feature dims: {sorted(dims)}")
    return graphs


class CarnasClassifier(BaseEstimator, ClassifierMixin):
    """Graph classifier that customizes a differentiable supernet per graph
    from a learned causal subgraph.

    Parameters mirror :class:`carnas.trainer.TrainConfig`; see its docstring
    for semantics. ``fit`` expects a list of :class:`carnas.data.Graph`.
    """

    def __init__(self, t=0.85, mu=0.26, theta1=0.36, theta2=0.010,
                 sigma_min=0.1, sigma_max=0.7, epochs=30, q_chunks=4,
                 d0=16, d1=32, d_s=64, k_layers=3, n_s=0, batch_size=32,
                 lr=1e-3, seed=0, arch_mode="causal", task="multiclass"):
        self.t = t
        self.mu = mu
        self.theta1 = theta1
        self.theta2 = theta2
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.epochs = epochs
        self.q_chunks = q_chunks
        self.d0 = d0
        self.d1 = d1
        self.d_s = d_s
        self.k_layers = k_layers
        self.n_s = n_s
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.arch_mode = arch_mode
        self.task = task

    def _config(self) -> TrainConfig:
        cfg = TrainConfig(
            t=self.t, mu=self.mu, theta1=self.theta1, theta2=self.theta2,
            sigma_min=self.sigma_min, sigma_max=self.sigma_max,
            epochs=self.epochs, q_chunks=self.q_chunks, d0=self.d0,
            d1=self.d1, d_s=self.d_s, k_layers=self.k_layers, n_s=self.n_s,
            batch_size=self.batch_size, lr=self.lr, seed=self.seed,
            arch_mode=self.arch_mode, task=self.task)
        cfg.validate()
        return cfg

    def fit(self, X, y=None):
        graphs = check_graphs(X)
        if y is not None:
            y = np.asarray(y, dtype=np.int64)
            if len(y) != len(graphs):
                raise DataError("y length does not match number of graphs")
            graphs = [Graph(g.num_nodes, g.edges, g.features, int(label), g.meta)
                      for g, label in zip(graphs, y)]
        labels = np.array([g.label for g in graphs])
        self.classes_ = np.unique(labels)
        cfg = self._config()
        dataset = Dataset(graphs=graphs,
                          splits={"train": list(range(len(graphs)))},
                          num_classes=int(labels.max()) + 1,
                          feature_dim=graphs[0].features.shape[1])
        self.model_ = CarnasModel(cfg, dataset.num_classes, dataset.feature_dim)
        for epoch in range(1, cfg.epochs + 1):
            train_epoch(self.model_, dataset, cfg, epoch)
        return self

    def predict_proba(self, X):
        self._check_fitted()
        graphs = check_graphs(X)
        dataset = Dataset(graphs=graphs, splits={"test": list(range(len(graphs)))},
                          num_classes=self.model_.num_classes,
                          feature_dim=self.model_.feature_dim)
        probs = []
        for batch in make_batches(dataset, "test", max(2, self.batch_size),
                                  shuffle=False):
            logits = self.model_.predict_logits(batch).data
            if self.task == "binary":
                p1 = 1.0 / (1.0 + np.exp(-logits.reshape(-1, 1)))
                probs.append(np.concatenate([1.0 - p1, p1], axis=1))
            else:
                shifted = logits - logits.max(axis=1, keepdims=True)
                e = np.exp(shifted)
                probs.append(e / e.sum(axis=1, keepdims=True))
        return np.concatenate(probs, axis=0)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise DataError("estimator is not fitted; call fit first")
