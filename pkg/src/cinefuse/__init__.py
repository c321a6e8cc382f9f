"""Segmentation-augmented cross-attention classification of cine clips."""

__version__ = "0.1.0"
