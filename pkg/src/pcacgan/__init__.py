"""Learned point cloud attribute compression with a sparse convolution engine."""

__version__ = "0.1.0"
