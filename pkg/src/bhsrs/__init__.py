"""Bayesian CNN engine for limited-data hyperspectral image classification."""

__version__ = "0.1.0"
