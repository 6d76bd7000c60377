"""Bayesian tracking of low-thrust maneuvering satellites from sparse radar passes."""

__version__ = "0.1.0"
