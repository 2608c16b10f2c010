"""Streaming video depth estimation with gradient-refined memory tokens."""

__version__ = "0.1.0"
