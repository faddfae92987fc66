"""Decoupled token embeddings for differentiable token merging in ViTs."""

__version__ = "0.1.0"
