"""Desk-scale differentially private masked-autoencoder training lab."""

__version__ = "0.1.0"

from . import accountant, autodiff, checkpoint, data, dp_optim, evaluate, mae, seeds

__all__ = [
    "accountant",
    "autodiff",
    "checkpoint",
    "data",
    "dp_optim",
    "evaluate",
    "mae",
    "seeds",
]
