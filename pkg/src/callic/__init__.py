"""Learned lossless image codec with per-image weight adaptation."""

from .adapt import AdapterConfig
from .codec import Model, compress, decompress
from .model import ModelConfig

__all__ = ["AdapterConfig", "Model", "ModelConfig", "compress", "decompress"]
__version__ = "0.1.0"
