"""Spatially sparse dynamic convolutions: gated residual blocks, FLOPs budgets, gather/scatter inference."""
from .budget import BlockBudget, SparsityConfig, block_budget, flops_dense, flops_sparse, network_fraction, total_loss
from .estimator import DynConvClassifier
from .gating import GumbelConfig
from .harness import bench, emit_ponder, ponder_maps, verify_equivalence
from .model import DynConvNet, ModelConfig, TrainingRecipe, build_model, toy_config
from .sparse import GatedBlockSpec, block_forward
from .tensor import ConfigurationError
from .training import train

__all__ = [
    "BlockBudget", "ConfigurationError", "DynConvClassifier", "DynConvNet", "GatedBlockSpec", "GumbelConfig",
    "ModelConfig", "SparsityConfig", "TrainingRecipe", "bench", "block_budget", "block_forward", "build_model",
    "emit_ponder", "flops_dense", "flops_sparse", "network_fraction", "ponder_maps", "toy_config", "total_loss",
    "train", "verify_equivalence",
]
