"""Dense batch GP regression, the projected-data GP posterior, and RKHS norms.

Used as an independent oracle for the state-space smoothers; everything here is
O(N^3) and meant for small problems only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .linops import NumericalError
from .models import Kernel, matern

PINV_RTOL = 1e-12
MAX_ORACLE_SIZE = 2000


def space_time_kernel(nu_t, lengthscale_t: float, output_scale_t: float, spatial: Kernel) -> Callable:
    """Product kernel on rows ``(t, x...)``: closed-form temporal Matern times ``spatial``."""

    def k(Z1, Z2):
        Z1, Z2 = np.atleast_2d(Z1), np.atleast_2d(Z2)
        kt = matern(Z1[:, :1] - Z2[:, 0][None, :], nu_t, lengthscale_t, output_scale_t)
        return kt * spatial.matrix(Z1[:, 1:], Z2[:, 1:])

    return k


@dataclass
class BatchGpProblem:
    kernel: Callable
    Z: np.ndarray
    y: np.ndarray
    noise_var: float
    mean: Callable | None = None

    def __post_init__(self):
        self.Z = np.asarray(self.Z, float)
        if self.Z.ndim == 1:
            self.Z = self.Z[:, None]
        self.y = np.asarray(self.y, float).ravel()
        if len(self.y) != len(self.Z):
            raise ValueError("targets and training inputs differ in length")
        if len(self.Z) > MAX_ORACLE_SIZE:
            raise ValueError(f"oracle refuses N={len(self.Z)} > {MAX_ORACLE_SIZE}")

    def prior_mean(self, Z) -> np.ndarray:
        Z = np.atleast_2d(Z)
        return np.zeros(len(Z)) if self.mean is None else np.asarray(self.mean(Z), float).ravel()

    def noisy_kernel(self, Z1, Z2) -> np.ndarray:
        """``k(z, z') + noise_var * [z == z']``."""
        Z1, Z2 = np.atleast_2d(Z1), np.atleast_2d(Z2)
        same = np.all(Z1[:, None, :] == Z2[None, :, :], axis=-1)
        return self.kernel(Z1, Z2) + self.noise_var * same


@dataclass
class GpPosterior:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov).copy()


def gp_posterior(p: BatchGpProblem, Zq) -> GpPosterior:
    """Exact GP regression at query rows ``Zq``."""
    Zq = np.atleast_2d(Zq)
    Kzz = p.kernel(p.Z, p.Z) + p.noise_var * np.eye(len(p.Z))
    try:
        cf = scipy.linalg.cho_factor(Kzz, lower=True)
    except np.linalg.LinAlgError:
        raise NumericalError("training covariance is singular") from None
    Kqz = p.kernel(Zq, p.Z)
    mean = p.prior_mean(Zq) + Kqz @ scipy.linalg.cho_solve(cf, p.y - p.prior_mean(p.Z))
    cov = p.kernel(Zq, Zq) - Kqz @ scipy.linalg.cho_solve(cf, Kqz.T)
    return GpPosterior(mean, 0.5 * (cov + cov.T))


def representer_matrix(p: BatchGpProblem, S: np.ndarray | None = None) -> np.ndarray:
    """``C = S (S^T (K + noise I) S)^+ S^T`` with a relative eigenvalue cutoff."""
    N = len(p.Z)
    Khat = p.kernel(p.Z, p.Z) + p.noise_var * np.eye(N)
    S = np.eye(N) if S is None else np.asarray(S, float)
    if S.ndim == 1:
        S = S[:, None]
    if S.shape[0] != N:
        raise ValueError(f"actions must have {N} rows")
    G = S.T @ Khat @ S
    G = 0.5 * (G + G.T)
    e, U = np.linalg.eigh(G)
    keep = e > PINV_RTOL * max(e.max(initial=0.0), np.finfo(float).tiny)
    SU = S @ U[:, keep]
    return (SU / e[keep]) @ SU.T


def itergp_posterior(p: BatchGpProblem, S, Zq) -> GpPosterior:
    """GP posterior given only the projected data ``S^T y``."""
    Zq = np.atleast_2d(Zq)
    C = representer_matrix(p, S)
    Kqz = p.kernel(Zq, p.Z)
    mean = p.prior_mean(Zq) + Kqz @ (C @ (p.y - p.prior_mean(p.Z)))
    cov = p.kernel(Zq, Zq) - Kqz @ C @ Kqz.T
    return GpPosterior(mean, 0.5 * (cov + cov.T))


def block_diagonal_actions(blocks) -> np.ndarray:
    """Stack per-step action matrices into the block-diagonal action over all data."""
    return scipy.linalg.block_diag(*[np.atleast_2d(np.asarray(b, float)) for b in blocks])


def rkhs_norm(p: BatchGpProblem, coefficients, centers) -> float:
    """Norm of ``sum_i c_i K^noise(., z_i)`` in the RKHS of the noisy kernel."""
    c = np.asarray(coefficients, float).ravel()
    Kc = p.noisy_kernel(centers, centers)
    return float(np.sqrt(max(c @ Kc @ c, 0.0)))


def expansion_eval(p: BatchGpProblem, coefficients, centers, Zq) -> np.ndarray:
    """Evaluate the kernel expansion ``sum_i c_i K^noise(z, z_i)`` at rows ``Zq``."""
    return p.noisy_kernel(Zq, centers) @ np.asarray(coefficients, float).ravel()


def worst_case_expansion(p: BatchGpProblem, z, S=None):
    """Unit-norm expansion maximizing the mean error at ``z`` (``z`` not a training input).

    Returns ``(centers, coefficients)``; the maximizer is the representer of
    ``y -> y(z) - mean(z | y)`` normalized to unit norm.
    """
    z = np.atleast_2d(z)
    a = representer_matrix(p, S) @ p.kernel(p.Z, z)[:, 0]
    centers = np.vstack([z, p.Z])
    coeffs = np.concatenate([[1.0], -a])
    nrm = rkhs_norm(p, coeffs, centers)
    return centers, coeffs / nrm
