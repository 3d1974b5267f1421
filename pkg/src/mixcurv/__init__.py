"""Mixed-curvature heterogeneous graph embeddings for two-layer ad retrieval."""

from .geometry import DomainError
from .graph import HeteroGraph, NodeRecord, build_from_logs
from .model import ModelConfig, MixedCurvatureModel
from .training import TrainConfig, Trainer
from .types import EdgeType, IndexType, NodeType, Relation

__all__ = [
    "DomainError", "EdgeType", "HeteroGraph", "IndexType", "MixedCurvatureModel", "ModelConfig",
    "NodeRecord", "NodeType", "Relation", "TrainConfig", "Trainer", "build_from_logs",
]
