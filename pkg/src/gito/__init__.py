"""Graph-informed transformer operator for mesh-agnostic PDE surrogates.

Layers: a numpy tensor/tape engine (``gito.autodiff``), spatial graph
construction (``gito.graphs``), linear attention blocks (``gito.layers``),
the hybrid graph transformer (``gito.hgt``), the transformer neural
operator (``gito.tno``), end-to-end assembly (``gito.model``), datasets
(``gito.data``), training (``gito.training``), checkpoints
(``gito.checkpoint``), an sklearn-style facade (``gito.estimator``) and a
CLI (``gito.cli``).
"""

from gito.autodiff import Tensor, backward, finite_difference_gradient, no_grad
from gito.data import Dataset, generate_poisson_dataset, load_dataset, save_dataset
from gito.estimator import GitoOperator
from gito.graphs import (
    GraphSpec,
    PointCloud,
    SpatialGraph,
    build_knn_graph,
    build_radius_graph,
    compute_features,
    graph_stats,
)
from gito.model import GitoModel, ModelConfig, NormStats, Sample, build_model
from gito.training import (
    TrainConfig,
    evaluate,
    evaluate_super_resolution,
    relative_l2,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "finite_difference_gradient",
    "no_grad",
    "PointCloud",
    "SpatialGraph",
    "GraphSpec",
    "build_knn_graph",
    "build_radius_graph",
    "compute_features",
    "graph_stats",
    "ModelConfig",
    "GitoModel",
    "NormStats",
    "Sample",
    "build_model",
    "Dataset",
    "generate_poisson_dataset",
    "load_dataset",
    "save_dataset",
    "TrainConfig",
    "train",
    "evaluate",
    "evaluate_super_resolution",
    "relative_l2",
    "GitoOperator",
]
