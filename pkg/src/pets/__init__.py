"""Probabilistic ensembles with trajectory sampling for model-based RL."""

__version__ = "0.1.0"
