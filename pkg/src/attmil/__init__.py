"""Attention-pooled multi-instance multi-label classification in numpy."""

__version__ = "0.1.0"
