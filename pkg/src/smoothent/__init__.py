"""Entropy estimation under Gaussian smoothing."""

__version__ = "0.1.0"
