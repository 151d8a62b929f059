"""Backpropagation-free 3D feature learning from image markers."""

__version__ = "0.1.0"
