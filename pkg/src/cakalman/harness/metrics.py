"""Point-estimate and marginal-density error metrics."""

from __future__ import annotations

import numpy as np


def mse(truth, mean) -> float:
    truth, mean = np.asarray(truth, float).ravel(), np.asarray(mean, float).ravel()
    if truth.shape != mean.shape:
        raise ValueError(f"length mismatch: {truth.size} vs {mean.size}")
    return float(np.mean((truth - mean) ** 2))


def avg_nld(truth, mean, variances) -> float:
    """Average marginal Gaussian negative log density per coordinate."""
    truth, mean = np.asarray(truth, float).ravel(), np.asarray(mean, float).ravel()
    var = np.asarray(variances, float).ravel()
    if not truth.shape == mean.shape == var.shape:
        raise ValueError(f"length mismatch: {truth.size}, {mean.size}, {var.size}")
    bad = np.flatnonzero(~(var > 0))
    if bad.size:
        raise ValueError(f"nonpositive variance {var[bad[0]]!r} at index {bad[0]}")
    return float(0.5 * np.mean((truth - mean) ** 2 / var + np.log(2 * np.pi * var)))
