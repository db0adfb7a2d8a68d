"""Separable grouped-convolution networks with searched communication policies."""

__version__ = "0.1.0"
