"""Hybrid semi-implicit/exponential spectral deferred corrections in a
multilevel parallel-in-time controller."""

__version__ = "0.1.0"
