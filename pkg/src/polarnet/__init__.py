"""Polar-transform pipeline for region-based retinal image classification."""

__version__ = "0.1.0"
