"""Attractor-guided neural network for skeleton-based motion prediction."""

from .model import AGN, ModelConfig, ParamStore, build, forward, mpjpe_loss
from .tensor import Tensor, backward

__all__ = ["AGN", "ModelConfig", "ParamStore", "Tensor", "backward", "build", "forward", "mpjpe_loss"]
__version__ = "0.1.0"
