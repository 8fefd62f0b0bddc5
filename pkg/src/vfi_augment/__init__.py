"""Coarse-to-fine video frame interpolation and dataset augmentation toolkit."""

__version__ = "0.1.0"
