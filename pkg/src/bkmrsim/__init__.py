"""Bayesian kernel machine regression and a simulation harness for studying
its test size and power on correlated, skewed exposure mixtures."""

__version__ = "0.1.0"
