"""Tooth-alignment transform regression with a diffusion-based training regularizer."""

__version__ = "0.1.0"
