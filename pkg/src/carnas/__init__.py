"""Causal-aware graph neural architecture search, desk scale.

Per input graph, a learned causal subgraph customizes a differentiable
super-network over six message-passing operators; invariance regularizers
over latent-space interventions keep the customization stable under
distribution shift.
"""

from .autodiff import ParamStore, Tensor, backward, grad_check
from .data import Dataset, Graph, GraphBatch, SpMotifConfig, generate_spmotif, load_jsonl, save_jsonl
from .estimator import CarnasClassifier
from .gnn import OperatorKind
from .trainer import CarnasModel, TrainConfig, evaluate, run_training

__all__ = [
    "CarnasClassifier",
    "CarnasModel",
    "Dataset",
    "Graph",
    "GraphBatch",
    "OperatorKind",
    "ParamStore",
    "SpMotifConfig",
    "Tensor",
    "TrainConfig",
    "backward",
    "evaluate",
    "generate_spmotif",
    "grad_check",
    "load_jsonl",
    "run_training",
    "save_jsonl",
]

__version__ = "0.1.0"
