"""Computation-aware Kalman filtering and smoothing with matrix-free operators."""

__version__ = "0.1.0"
