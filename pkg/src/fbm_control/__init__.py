"""Partially observed stochastic control with fractional Brownian drivers."""

__version__ = "0.1.0"
