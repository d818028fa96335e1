"""Hierarchical spectral learning of compositional Hermite targets."""

__version__ = "0.1.0"
