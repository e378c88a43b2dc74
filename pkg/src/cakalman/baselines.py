"""Ensemble Kalman filter baselines: stochastic EnKF and the transform filter (ETKF).

The ETKF comes in two flavours that differ only in how the ensemble is
initialized and predicted: by sampling (``sampled``) or by Lanczos square roots
of the initial and predictive covariances (``lanczos``).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .linops import DiagonalMap, LinearMap, aslinearmap, dense, lanczos_lsqrt, psd_sqrt
from .models import DiscreteLgssm


@dataclass
class EnsembleTrace:
    means: list
    variances: list
    members: list | None = None
    factors: list | None = None
    wall_time_s: float = 0.0
    flags: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.means) - 1


class _LowRankPlusQ(LinearMap):
    """``X X^T + Q`` as an operator."""

    def __init__(self, X: np.ndarray, Q: LinearMap):
        self.X, self.Q = X, Q
        self.shape = Q.shape

    def _matmat(self, V):
        return self.X @ (self.X.T @ V) + self.Q._matmat(V)

    _rmatmat = _matmat


def _moments(E: np.ndarray):
    m = E.mean(axis=1)
    X = (E - m[:, None]) / np.sqrt(E.shape[1] - 1)
    return m, X


def _check_ensemble(r: int, minimum: int):
    if r < minimum:
        raise ValueError(f"ensemble size must be at least {minimum}, got {r}")


def _sample_transition(model: DiscreteLgssm, k: int, E: np.ndarray, rng) -> np.ndarray:
    Lq = model.process_noise_sqrt(k)
    return model.A[k] @ E + model.b[k][:, None] + Lq @ rng.standard_normal((Lq.cols, E.shape[1]))


def _initial_ensemble(model: DiscreteLgssm, r: int, rng) -> np.ndarray:
    L0 = model.initial_sqrt()
    return model.mu[0][:, None] + L0 @ rng.standard_normal((L0.cols, r))


def enkf_filter(model: DiscreteLgssm, observations, r: int, seed, store_members: bool = False,
                extra_time_s: float = 0.0) -> EnsembleTrace:
    """Stochastic EnKF with perturbed observations and sampled prediction."""
    _check_ensemble(r, 2)
    obs = model.check_observations(observations)
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    E = _initial_ensemble(model, r, rng)
    tr = EnsembleTrace([], [], [] if store_members else None)

    def record(E):
        m, X = _moments(E)
        tr.means.append(m)
        tr.variances.append(np.sum(X * X, axis=1))
        if store_members:
            tr.members.append(E.copy())

    record(E)
    for k in range(1, model.n + 1):
        E = _sample_transition(model, k - 1, E, rng)
        if not model.is_missing(k, obs):
            H, Lam = model.H[k], model.Lam[k]
            _, X = _moments(E)
            Y = H @ X
            C = Y @ Y.T + dense(Lam)
            Lsq = _lam_sqrt(Lam)
            y = np.asarray(obs[k], float) - model.offset(k)
            perturbed = y[:, None] + Lsq @ rng.standard_normal((Lsq.cols, r))
            innov = perturbed - H @ E
            try:
                sol = scipy.linalg.solve(C, innov, assume_a="pos")
            except np.linalg.LinAlgError:
                tr.flags.append(f"pinv@{k}")
                sol = np.linalg.pinv(C, rcond=1e-12, hermitian=True) @ innov
            E = E + X @ (Y.T @ sol)
        record(E)
    tr.wall_time_s = time.perf_counter() - start + extra_time_s
    return tr


def _lam_sqrt(Lam: LinearMap) -> LinearMap:
    if isinstance(Lam, DiagonalMap):
        return DiagonalMap(np.sqrt(np.clip(Lam.diag, 0.0, None)))
    return aslinearmap(psd_sqrt(Lam))


def _lam_solve(Lam: LinearMap, B: np.ndarray) -> np.ndarray:
    if isinstance(Lam, DiagonalMap):
        if np.any(Lam.diag <= 0):
            raise ValueError("ETKF needs a positive definite observation noise")
        return B / Lam.diag[:, None] if B.ndim == 2 else B / Lam.diag
    return np.linalg.solve(dense(Lam), B)


def etkf_update(m: np.ndarray, X: np.ndarray, H, Lam, y: np.ndarray, c=0.0, flags: list | None = None):
    """Deterministic transform update of mean ``m`` and deviations ``X`` (``X X^T`` = covariance)."""
    H, Lam = aslinearmap(H), aslinearmap(Lam)
    Y = H @ X
    LiY = _lam_solve(Lam, Y)
    inner = np.eye(X.shape[1]) + Y.T @ LiY
    inner = 0.5 * (inner + inner.T)
    e, U = np.linalg.eigh(inner)
    if e.min() < 1.0 - 1e-8:
        if flags is not None:
            flags.append("transform_clipped")
    e = np.clip(e, 1.0, None)
    T = (U / e) @ U.T
    Tsqrt = (U / np.sqrt(e)) @ U.T
    d = np.asarray(y, float) - H @ m - c
    m_a = m + X @ (T @ (LiY.T @ d))
    return m_a, X @ Tsqrt


def etkf_filter(model: DiscreteLgssm, observations, r: int, seed, init_predict_mode: str = "sampled",
                store_factors: bool = False, extra_time_s: float = 0.0) -> EnsembleTrace:
    """ETKF with sampled (``sampled``) or Lanczos (``lanczos``) initialization and prediction."""
    if init_predict_mode not in ("sampled", "lanczos"):
        raise ValueError("init_predict_mode must be 'sampled' or 'lanczos'")
    sampled = init_predict_mode == "sampled"
    _check_ensemble(r, 2 if sampled else 1)
    obs = model.check_observations(observations)
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    D = model.state_dim
    tr = EnsembleTrace([], [], factors=[] if store_factors else None)

    def lanczos(op):
        res = lanczos_lsqrt(op, min(r, D), rng.standard_normal(D), restart=rng)
        if res.restarts:
            tr.flags.append(f"lanczos_restart@{len(tr.means)}")
        return res.factor

    if sampled:
        m, X = _moments(_initial_ensemble(model, r, rng))
    else:
        m, X = model.mu[0].copy(), lanczos(model.Sigma[0])

    def record(m, X):
        tr.means.append(m)
        tr.variances.append(np.sum(X * X, axis=1))
        if store_factors:
            tr.factors.append(X)

    record(m, X)
    for k in range(1, model.n + 1):
        if sampled:
            E = m[:, None] + np.sqrt(X.shape[1] - 1) * X
            m, X = _moments(_sample_transition(model, k - 1, E, rng))
        else:
            AX = model.A[k - 1] @ X
            m = model.A[k - 1] @ m + model.b[k - 1]
            X = lanczos(_LowRankPlusQ(AX, model.Q[k - 1]))
        if not model.is_missing(k, obs):
            m, X = etkf_update(m, X, model.H[k], model.Lam[k], obs[k], model.offset(k), tr.flags)
        record(m, X)
    tr.wall_time_s = time.perf_counter() - start + extra_time_s
    return tr
