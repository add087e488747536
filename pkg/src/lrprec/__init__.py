"""Explainable image-based relation prediction with layer-wise relevance propagation."""

__version__ = "0.1.0"
