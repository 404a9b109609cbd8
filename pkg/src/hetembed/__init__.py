"""Heterogeneous recipe-graph embeddings with adversarially trained multi-view GNNs."""

from .autodiff import Tape, Tensor, backward
from .hetgraph import HetGraph, LabelSet, Modality, NodeType, RelationType, load_dataset, load_graph, make_split, save_graph
from .model import AblationSwitches, ModelDims, ModelParams, build_plan, forward, init_params
from .sampler import MetaPath, WalkConfig, sample_all, sample_neighbors
from .synthetic import SyntheticConfig, generate_synthetic, structure_signal_config
from .trainer import MetricsReport, TrainConfig, evaluate, export_embeddings, train

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "HetGraph",
    "LabelSet",
    "Modality",
    "NodeType",
    "RelationType",
    "load_dataset",
    "load_graph",
    "make_split",
    "save_graph",
    "AblationSwitches",
    "ModelDims",
    "ModelParams",
    "build_plan",
    "forward",
    "init_params",
    "MetaPath",
    "WalkConfig",
    "sample_all",
    "sample_neighbors",
    "SyntheticConfig",
    "generate_synthetic",
    "structure_signal_config",
    "MetricsReport",
    "TrainConfig",
    "evaluate",
    "export_embeddings",
    "train",
]
