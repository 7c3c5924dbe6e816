"""Perceiver: cross-attention into a small latent array, on numpy."""
from .errors import (ConfigError, DimensionError, DivergenceError, DomainError, NonFiniteError,
                     PerceiverError, StateError)
from .model import Perceiver, PerceiverConfig, build, load_checkpoint, save_checkpoint
from .positional import FourierConfig, fourier_features

__all__ = [
    "ConfigError", "DimensionError", "DivergenceError", "DomainError", "NonFiniteError",
    "PerceiverError", "StateError", "Perceiver", "PerceiverConfig", "build",
    "load_checkpoint", "save_checkpoint", "FourierConfig", "fourier_features",
]

__version__ = "0.1.0"
