"""Masked trajectory autoencoding lab: toy envs, datasets, model, training, downstream evals."""

__version__ = "0.1.0"
