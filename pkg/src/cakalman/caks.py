"""Computation-aware RTS smoother, time interpolation and posterior sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cakf import CakfTrace
from .linops import DiagonalMap, DowndateMap, LinearMap, aslinearmap, empty_factor, psd_sqrt, truncate_downdate


@dataclass
class CaksTrace:
    filter_trace: CakfTrace
    m: list
    M: list
    w: list  # backward carriers
    W: list
    truncation_rank: int | None

    @property
    def n(self) -> int:
        return len(self.m) - 1

    @property
    def means(self) -> np.ndarray:
        return np.stack(self.m)

    def cov_op(self, k: int) -> DowndateMap:
        return DowndateMap(self.filter_trace.model.Sigma[k], self.M[k])

    def variances(self, k: int) -> np.ndarray:
        return self.cov_op(k).diagonal()


def _project(trace: CakfTrace, k: int, X: np.ndarray) -> np.ndarray:
    """``(I - W_k W_k^T P^-_k) X`` at an observed step, identity otherwise."""
    if not trace.observed(k) or trace.W[k].shape[1] == 0 or X.size == 0:
        return X
    P_pred = trace.cov_op(k, "predicted")
    Wk = trace.W[k]
    return X - Wk @ (Wk.T @ (P_pred @ X))


def caks_smooth(trace: CakfTrace, truncation_rank: int | None | str = "filter") -> CaksTrace:
    """Backward pass over a filter trace.

    ``truncation_rank`` bounds the columns of the carrier ``W`` after every
    step; the default reuses the filter's bound, ``None`` disables truncation.
    """
    model = trace.model
    bound = trace.truncation_rank if truncation_rank == "filter" else truncation_rank
    n, D = trace.n, model.state_dim

    def trunc(X):
        if bound is None:
            return X
        return truncate_downdate(X, bound)[0]

    m, M, w, W = [None] * (n + 1), [None] * (n + 1), [None] * (n + 1), [None] * (n + 1)
    m[n], M[n] = trace.m[n], trace.M_hat(n)
    if trace.observed(n):
        w[n], W[n] = trace.w[n], trunc(trace.W[n])
    else:
        w[n], W[n] = np.zeros(D), empty_factor(D)
    for k in range(n - 1, -1, -1):
        A = model.A[k]
        Atw = A.T @ w[k + 1]
        AtW = A.T @ W[k + 1] if W[k + 1].shape[1] else empty_factor(D)
        P = trace.cov_op(k, "untruncated")
        both = P @ np.column_stack([Atw, AtW])
        m[k] = trace.m[k] + both[:, 0]
        M[k] = np.hstack([trace.M_hat(k), both[:, 1:]])
        carried = _project(trace, k, np.column_stack([Atw, AtW]))
        if trace.observed(k):
            w[k] = trace.w[k] + carried[:, 0]
            W[k] = trunc(np.hstack([trace.W[k], carried[:, 1:]]))
        else:
            w[k] = carried[:, 0]
            W[k] = trunc(carried[:, 1:])
    return CaksTrace(trace, m, M, w, W, bound)


# --- interpolation ---------------------------------------------------------


@dataclass
class InterpolatedState:
    mean: np.ndarray
    factor: np.ndarray
    prior_cov: LinearMap

    def cov_op(self) -> DowndateMap:
        return DowndateMap(self.prior_cov, self.factor)

    def variances(self) -> np.ndarray:
        return self.cov_op().diagonal()


def _grid(trace: CakfTrace):
    model = trace.model
    if model.gmp is None or model.times is None:
        raise ValueError("interpolation needs a model built from a continuous-time prior")
    return np.asarray(model.times), model.gmp


def _locate(times, t) -> int:
    return int(np.searchsorted(times, t, side="right")) - 1


def _prior_at(gmp, t):
    mu, S = gmp.marginal(t)
    return np.asarray(mu, float), aslinearmap(S)


def cakf_interpolate(t: float, trace: CakfTrace) -> InterpolatedState:
    """Filtering belief at any time ``t`` from the stored step beliefs."""
    times, gmp = _grid(trace)
    k = _locate(times, t)
    mu, Sig = _prior_at(gmp, t)
    if k < 0:
        return InterpolatedState(mu, empty_factor(len(mu)), Sig)
    if t == times[k]:
        return InterpolatedState(trace.m[k], trace.M_hat(k), trace.model.Sigma[k])
    A, b, _ = gmp.transition(t, times[k])
    A = aslinearmap(A)
    Mk = trace.M_kept[k]
    return InterpolatedState(A @ trace.m[k] + b, A @ Mk if Mk.shape[1] else Mk, Sig)


def caks_interpolate(t: float, trace: CakfTrace, smoother: CaksTrace) -> InterpolatedState:
    """Smoothing belief at any time ``t``; beyond the last step this is the filter belief."""
    times, gmp = _grid(trace)
    k = _locate(times, t)
    n = trace.n
    if k >= 0 and t == times[k]:
        return InterpolatedState(smoother.m[k], smoother.M[k], trace.model.Sigma[k])
    f = cakf_interpolate(t, trace)
    nxt = k + 1
    if nxt > n:
        return f
    A_next = aslinearmap(gmp.transition(times[nxt], t)[0])
    W = smoother.W[nxt]
    rhs = np.column_stack([A_next.T @ smoother.w[nxt], A_next.T @ W if W.shape[1] else np.zeros((len(f.mean), 0))])
    both = f.cov_op() @ rhs
    return InterpolatedState(f.mean + both[:, 0], np.hstack([f.factor, both[:, 1:]]), f.prior_cov)


# --- sampling ----------------------------------------------------------------


def _noise_sqrt(Lam: LinearMap) -> LinearMap:
    if isinstance(Lam, DiagonalMap):
        return DiagonalMap(np.sqrt(np.clip(Lam.diag, 0.0, None)))
    return aslinearmap(psd_sqrt(Lam))


def posterior_sample(
    trace: CakfTrace,
    rng_seed=None,
    size: int | None = None,
    stop_after_filter: bool = False,
    pinned: bool = False,
) -> np.ndarray:
    """Trajectory draws from the filter's implied smoothing (or filtering) posterior.

    Forward: a prior draw is corrected step by step with the filter's own
    projected gains, and truncated directions are re-injected as independent
    noise. Backward: the smoother carriers are applied to the simulated
    residuals. ``pinned`` replaces every random draw by zero, which yields the
    smoother mean. Shape ``(n + 1, D)`` or ``(n + 1, D, size)``.
    """
    model, obs = trace.model, trace.observations
    rng = np.random.default_rng(rng_seed)
    cols = 1 if size is None else size
    n, D = trace.n, model.state_dim

    def draw(L) -> np.ndarray:
        L = aslinearmap(L) if not isinstance(L, np.ndarray) else L
        rows, inner = L.shape
        if pinned or inner == 0:
            return np.zeros((rows, cols))
        return L @ rng.standard_normal((inner, cols))

    u = model.mu[0][:, None] + draw(model.initial_sqrt())
    forward = [u]
    corr = [None] * (n + 1)
    for k in range(1, n + 1):
        u = model.A[k - 1] @ (u + draw(trace.M_dropped[k - 1])) + model.b[k - 1][:, None] \
            + draw(model.process_noise_sqrt(k - 1))
        if trace.observed(k):
            H = model.H[k]
            eps = draw(_noise_sqrt(model.Lam[k]))
            resid = np.asarray(obs[k], float)[:, None] - np.reshape(model.offset(k), (-1, 1)) - H @ u - eps
            Vk = trace.V[k]
            corr[k] = H.T @ (Vk @ (Vk.T @ resid)) if Vk.shape[1] else np.zeros((D, cols))
            u = u + trace.cov_op(k, "predicted") @ corr[k]
        forward.append(u)
    if stop_after_filter:
        out = np.stack(forward)
        return out[..., 0] if size is None else out

    samples = [None] * (n + 1)
    samples[n] = forward[n]
    w = corr[n] if corr[n] is not None else np.zeros((D, cols))
    for k in range(n - 1, -1, -1):
        carry = model.A[k].T @ w
        samples[k] = forward[k] + trace.cov_op(k, "untruncated") @ carry
        carry = _project(trace, k, carry)
        w = carry + corr[k] if corr[k] is not None else carry
    out = np.stack(samples)
    return out[..., 0] if size is None else out

