"""Spatially dependent misclassification error models."""

__version__ = "0.1.0"
