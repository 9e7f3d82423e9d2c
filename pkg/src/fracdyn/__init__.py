"""Markov-approximate fractional Brownian motion: weights, simulation and inference."""

__version__ = "0.1.0"
