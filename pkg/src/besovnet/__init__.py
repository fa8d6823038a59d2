"""Sparse ReLU networks over anisotropic Besov classes: constructive
approximation, Bayesian priors, posterior sampling and rate experiments."""

__version__ = "0.1.0"
