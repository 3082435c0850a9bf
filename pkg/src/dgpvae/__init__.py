"""Disentangled Gaussian-process VAE for multivariate time series."""

__version__ = "0.1.0"
