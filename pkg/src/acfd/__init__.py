"""Anchor-based cartoon face detector with asymmetric convolution fusion."""

__version__ = "0.1.0"
