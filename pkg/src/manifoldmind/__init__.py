"""Curvature-aware probabilistic sphere embeddings with path-based recommendation."""

__version__ = "0.1.0"
