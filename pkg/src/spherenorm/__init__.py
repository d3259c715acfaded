"""Geometry of normalization layers in multilayer perceptrons."""

__version__ = "0.1.0"
