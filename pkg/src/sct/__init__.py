"""Salient channel tuning on a frozen Vision Transformer, in numpy."""

__version__ = "0.1.0"
