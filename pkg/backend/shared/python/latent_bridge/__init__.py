"""
latent_bridge: a desk-scale bridge from a toy multimodal LLM to a toy flow-matching diffusion model.

The MLLM carries a trainable generation branch beside its frozen understanding weights and
predicts patch-embedding grids by masked autoregression; a latent ControlNet feeds those grids
into a frozen diffusion backbone.
"""
from .errors import (
    ConfigError,
    DimensionMismatchError,
    DivergenceError,
    FrozenTensorError,
    LatentBridgeError,
    OutOfRangeError,
)

__all__ = [
    "ConfigError",
    "DimensionMismatchError",
    "DivergenceError",
    "FrozenTensorError",
    "LatentBridgeError",
    "OutOfRangeError",
]
