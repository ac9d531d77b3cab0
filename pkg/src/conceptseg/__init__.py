"""Latent concept-region pooling, global token reasoning and the losses,
matching, metrics and synthetic data needed to train it end to end."""

from . import autodiff

__all__ = ["autodiff"]
__version__ = "0.1.0"
