"""Pixel-similarity regularization for small CNNs, with a black-box attack battery."""

__version__ = "0.1.0"
