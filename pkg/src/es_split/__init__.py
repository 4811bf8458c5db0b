"""Dual-channel MLP node classification with learned edge splitting."""
from .graph import Graph, WeightedAdjacency, load_dataset, load_graph, save_graph
from .model import LossWeights, ModelParams, init_params, predict
from .train import RunResult, TrainConfig, train_model

__all__ = [
    "Graph", "WeightedAdjacency", "load_dataset", "load_graph", "save_graph",
    "LossWeights", "ModelParams", "init_params", "predict",
    "RunResult", "TrainConfig", "train_model",
]
__version__ = "0.1.0"
