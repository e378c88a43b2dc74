"""Dense reference filter, smoothers, posterior sampler and time interpolation.

These run in O(D^3) per step and serve as oracles for the matrix-free,
computation-aware recursions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .linops import DenseMap, NumericalError, dense, empty_factor, psd_sqrt
from .models import DiscreteLgssm

MAX_DENSE_DIM = 4096


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov).copy()


@dataclass
class ExactFilterTrace:
    predicted: list
    filtered: list
    residuals: list
    innovations: list
    gains: list
    # downdate form only
    M_pred: list | None = None
    M: list | None = None
    V: list | None = None
    W: list | None = None

    @property
    def n(self) -> int:
        return len(self.filtered) - 1

    @property
    def means(self) -> np.ndarray:
        return np.stack([b.mean for b in self.filtered])


@dataclass
class SmootherResult:
    beliefs: list
    w: list
    W: list
    M: list | None = None

    @property
    def means(self) -> np.ndarray:
        return np.stack([b.mean for b in self.beliefs])


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def _check_dim(model: DiscreteLgssm, max_dim: int) -> None:
    if model.state_dim > max_dim:
        raise ValueError(
            f"dense reference path refuses D={model.state_dim} > {max_dim}; raise max_dim explicitly"
        )


def innovation_cholesky(G: np.ndarray, step: int) -> np.ndarray:
    """Lower Cholesky factor of ``G``; one jitter retry, then :class:`NumericalError`."""
    G = _sym(G)
    try:
        return np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(G))) if len(G) else 0.0
    if not scale > 0:
        raise NumericalError(f"innovation matrix is singular at step {step}")
    jitter = 1e-10 * scale
    try:
        return np.linalg.cholesky(G + jitter * np.eye(len(G)))
    except np.linalg.LinAlgError:
        raise NumericalError(f"innovation matrix is singular at step {step}") from None


def _inv_sqrt_factor(L: np.ndarray) -> np.ndarray:
    """``V`` with ``V V^T = (L L^T)^{-1}``."""
    return scipy.linalg.solve_triangular(L, np.eye(len(L)), lower=True).T


def _observed(model, observations, k):
    return not model.is_missing(k, observations)


def kalman_filter(model: DiscreteLgssm, observations, max_dim: int = MAX_DENSE_DIM) -> ExactFilterTrace:
    _check_dim(model, max_dim)
    obs = model.check_observations(observations)
    m = model.mu[0].copy()
    P = _sym(dense(model.Sigma[0]))
    trace = ExactFilterTrace([GaussianBelief(m, P)], [GaussianBelief(m, P)], [None], [None], [None])
    for k in range(1, model.n + 1):
        A = dense(model.A[k - 1])
        m = A @ m + model.b[k - 1]
        P = _sym(A @ P @ A.T + dense(model.Q[k - 1]))
        trace.predicted.append(GaussianBelief(m, P))
        r = G = K = None
        if _observed(model, obs, k):
            H = dense(model.H[k])
            r = np.asarray(obs[k], float) - H @ m - model.offset(k)
            G = _sym(H @ P @ H.T + dense(model.Lam[k]))
            L = innovation_cholesky(G, k)
            K = scipy.linalg.cho_solve((L, True), H @ P).T
            m = m + K @ r
            P = _sym(P - K @ G @ K.T)
        trace.filtered.append(GaussianBelief(m, P))
        trace.residuals.append(r)
        trace.innovations.append(G)
        trace.gains.append(K)
    return trace


def downdate_kalman_filter(model: DiscreteLgssm, observations, max_dim: int = MAX_DENSE_DIM) -> ExactFilterTrace:
    """Kalman filter storing covariances as ``Sigma_k - M_k M_k^T``."""
    _check_dim(model, max_dim)
    obs = model.check_observations(observations)
    D = model.state_dim
    m = model.mu[0].copy()
    M = empty_factor(D)
    P0 = _sym(dense(model.Sigma[0]))
    trace = ExactFilterTrace(
        [GaussianBelief(m, P0)], [GaussianBelief(m, P0)], [None], [None], [None],
        M_pred=[M], M=[M], V=[None], W=[None],
    )
    for k in range(1, model.n + 1):
        m = model.A[k - 1] @ m + model.b[k - 1]
        M = model.A[k - 1] @ M if M.shape[1] else empty_factor(D)
        Sigma = dense(model.Sigma[k])
        P_pred = _sym(Sigma - M @ M.T)
        trace.predicted.append(GaussianBelief(m, P_pred))
        trace.M_pred.append(M)
        r = G = K = V = W = None
        if _observed(model, obs, k):
            H = dense(model.H[k])
            r = np.asarray(obs[k], float) - H @ m - model.offset(k)
            PHt = P_pred @ H.T
            G = _sym(H @ PHt + dense(model.Lam[k]))
            L = innovation_cholesky(G, k)
            V = _inv_sqrt_factor(L)
            W = H.T @ V
            K = PHt @ (V @ V.T)
            m = m + K @ r
            M = np.hstack([M, P_pred @ W])
        trace.filtered.append(GaussianBelief(m, _sym(Sigma - M @ M.T)))
        trace.M.append(M)
        trace.residuals.append(r)
        trace.innovations.append(G)
        trace.gains.append(K)
        trace.V.append(V)
        trace.W.append(W)
    return trace


def rts_smoother(trace: ExactFilterTrace, model: DiscreteLgssm) -> list:
    n = trace.n
    out = [None] * (n + 1)
    out[n] = trace.filtered[n]
    for k in range(n - 1, -1, -1):
        f, p_next, s_next = trace.filtered[k], trace.predicted[k + 1], out[k + 1]
        A = dense(model.A[k])
        try:
            Gs = scipy.linalg.solve(p_next.cov, A @ f.cov, assume_a="sym").T
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning):
            raise NumericalError(f"predicted covariance is singular at step {k + 1}") from None
        if not np.all(np.isfinite(Gs)):
            raise NumericalError(f"predicted covariance is singular at step {k + 1}")
        mean = f.mean + Gs @ (s_next.mean - p_next.mean)
        cov = _sym(f.cov + Gs @ (s_next.cov - p_next.cov) @ Gs.T)
        out[k] = GaussianBelief(mean, cov)
    return out


def inverse_free_smoother(trace: ExactFilterTrace, model: DiscreteLgssm) -> SmootherResult:
    """RTS smoother via backward information carriers; no state covariance is inverted."""
    n, D = trace.n, model.state_dim
    w = [None] * (n + 1)
    W = [None] * (n + 1)
    for k in range(n, -1, -1):
        G = trace.innovations[k]
        if G is not None:
            H = dense(model.H[k])
            L = innovation_cholesky(G, k)
            Ginv_r = scipy.linalg.cho_solve((L, True), trace.residuals[k])
            wk, Wk = H.T @ Ginv_r, H.T @ _inv_sqrt_factor(L)
        else:
            wk, Wk = np.zeros(D), empty_factor(D)
        if k < n:
            A = dense(model.A[k])
            carry_w, carry_W = A.T @ w[k + 1], A.T @ W[k + 1]
            if G is not None:
                # (I - H^T G^{-1} H P^-) applied to the carried terms
                proj = H.T @ scipy.linalg.cho_solve((L, True), H @ trace.predicted[k].cov)
                carry_w = carry_w - proj @ carry_w
                carry_W = carry_W - proj @ carry_W
            wk = wk + carry_w
            Wk = np.hstack([Wk, carry_W])
        w[k], W[k] = wk, Wk

    beliefs, factors = [], [] if trace.M is not None else None
    for k in range(n + 1):
        f = trace.filtered[k]
        if k == n:
            beliefs.append(f)
            if factors is not None:
                factors.append(trace.M[k])
            continue
        PAt = f.cov @ dense(model.A[k]).T
        U = PAt @ W[k + 1]
        beliefs.append(GaussianBelief(f.mean + PAt @ w[k + 1], _sym(f.cov - U @ U.T)))
        if factors is not None:
            factors.append(np.hstack([trace.M[k], U]))
    if factors is not None:
        beliefs = [
            GaussianBelief(b.mean, _sym(dense(model.Sigma[k]) - factors[k] @ factors[k].T))
            for k, b in enumerate(beliefs)
        ]
    return SmootherResult(beliefs, w, W, factors)


def matheron_sample(
    model: DiscreteLgssm,
    observations,
    rng_seed=None,
    size: int | None = None,
    pinned: bool = False,
    trace: ExactFilterTrace | None = None,
) -> np.ndarray:
    """Joint smoothing-posterior trajectory draws by pathwise (Matheron) conditioning.

    Returns shape ``(n + 1, D)``, or ``(n + 1, D, size)`` if ``size`` is given.
    With ``pinned=True`` every prior draw sits at its mean and the result is the
    smoother mean.
    """
    obs = model.check_observations(observations)
    if trace is None:
        trace = kalman_filter(model, obs)
    rng = np.random.default_rng(rng_seed)
    cols = 1 if size is None else size
    n, D = model.n, model.state_dim

    def draw(L):
        if pinned:
            return np.zeros((L.rows, cols))
        return L @ rng.standard_normal((L.cols, cols))

    u = model.mu[0][:, None] + draw(model.initial_sqrt())
    forward = [u]
    corr = [None] * (n + 1)
    chol = [None] * (n + 1)
    for k in range(1, n + 1):
        u = model.A[k - 1] @ u + model.b[k - 1][:, None] + draw(model.process_noise_sqrt(k - 1))
        if _observed(model, obs, k):
            H = dense(model.H[k])
            Lam_sqrt = _lam_sqrt(model, k)
            y_sim = H @ u + np.reshape(model.offset(k), (-1, 1)) + draw(Lam_sqrt)
            d = np.asarray(obs[k], float)[:, None] - y_sim
            u = u + trace.gains[k] @ d
            chol[k] = innovation_cholesky(trace.innovations[k], k)
            corr[k] = H.T @ scipy.linalg.cho_solve((chol[k], True), d)
        forward.append(u)

    samples = [None] * (n + 1)
    samples[n] = forward[n]
    w = corr[n] if corr[n] is not None else np.zeros((D, cols))
    for k in range(n - 1, -1, -1):
        A = dense(model.A[k])
        carry = A.T @ w
        samples[k] = forward[k] + trace.filtered[k].cov @ carry
        if corr[k] is not None:
            H = dense(model.H[k])
            carry = carry - H.T @ scipy.linalg.cho_solve((chol[k], True), H @ (trace.predicted[k].cov @ carry))
            w = corr[k] + carry
        else:
            w = carry
    out = np.stack(samples)
    return out[..., 0] if size is None else out


def _lam_sqrt(model: DiscreteLgssm, k: int) -> DenseMap:
    cache = model.__dict__.setdefault("_lam_sqrt", {})
    if k not in cache:
        cache[k] = DenseMap(psd_sqrt(model.Lam[k]))
    return cache[k]


# --- continuous-time interpolation -----------------------------------------


@dataclass
class Interpolated:
    filtered: GaussianBelief
    smoothed: GaussianBelief | None = field(default=None)


def _locate(times: np.ndarray, t: float) -> int:
    """Largest ``k`` with ``times[k] <= t`` (``-1`` before the grid)."""
    return int(np.searchsorted(times, t, side="right")) - 1


def interpolate(
    trace: ExactFilterTrace, model: DiscreteLgssm, t: float, smoother: SmootherResult | None = None
) -> Interpolated:
    """Filtering (and, given ``smoother``, smoothing) marginal at an arbitrary time ``t``."""
    if model.gmp is None or model.times is None:
        raise ValueError("interpolation needs a model built from a continuous-time prior")
    times, gmp = np.asarray(model.times), model.gmp
    k = _locate(times, t)
    n = trace.n
    if k >= 0 and t == times[k]:
        return Interpolated(trace.filtered[k], None if smoother is None else smoother.beliefs[k])
    if k < 0:
        mu, S = gmp.marginal(t)
        f = GaussianBelief(np.asarray(mu, float), _sym(dense(S)))
        nxt = 0
    else:
        A, b, Q = gmp.transition(t, times[k])
        A = dense(A)
        fk = trace.filtered[k]
        f = GaussianBelief(A @ fk.mean + b, _sym(A @ fk.cov @ A.T + dense(Q)))
        nxt = k + 1
    if smoother is None:
        return Interpolated(f)
    if nxt > n:
        return Interpolated(f, f)
    A_next = dense(gmp.transition(times[nxt], t)[0])
    PAt = f.cov @ A_next.T
    U = PAt @ smoother.W[nxt]
    s = GaussianBelief(f.mean + PAt @ smoother.w[nxt], _sym(f.cov - U @ U.T))
    return Interpolated(f, s)
