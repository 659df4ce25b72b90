"""Unified generative retrieval and ranking on a small autodiff engine."""

__version__ = "0.1.0"
