"""Quantization-aware training of a variational Bayesian CNN for gear-fault diagnosis."""

__version__ = "0.1.0"
