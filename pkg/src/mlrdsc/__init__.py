"""Multi-level deep subspace clustering."""

from .datasets import SampleSet, SyntheticSpec, synth_union_of_subspaces
from .network import ArchitectureSpec, MultiLevelAE, init_params
from .selfexpress import LossBreakdown, LossWeights, SelfExpressionParams
from .spectral import build_affinity, clustering_error, spectral_cluster
from .trainer import TrainConfig, pretrain, resume, train

__all__ = [
    "ArchitectureSpec", "LossBreakdown", "LossWeights", "MultiLevelAE", "SampleSet", "SelfExpressionParams",
    "SyntheticSpec", "TrainConfig", "build_affinity", "clustering_error", "init_params", "pretrain", "resume",
    "spectral_cluster", "synth_union_of_subspaces", "train",
]
