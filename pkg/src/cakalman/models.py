"""Kernels, Gauss-Markov priors and their discretization to state-space models."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from . import linops
from .linops import (
    DiagonalMap,
    GramMap,
    IdentityMap,
    KroneckerMap,
    LinearMap,
    SelectionMap,
    aslinearmap,
)

EARTH_RADIUS_KM = 6371.0


# --- kernels --------------------------------------------------------------


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Euclidean:
    dim: int = 1

    def check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1 and self.dim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise GeometryError(f"expected points of dimension {self.dim}, got shape {X.shape}")
        return X

    def embed(self, X) -> np.ndarray:
        return X


@dataclass(frozen=True)
class Sphere:
    """Points given as (latitude, longitude) in degrees; distances are chordal."""

    radius: float = 1.0

    def check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1 and X.size == 2:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != 2:
            raise GeometryError(f"expected (lat, lon) pairs, got shape {X.shape}")
        return X

    def embed(self, X) -> np.ndarray:
        lat, lon = np.deg2rad(X[:, 0]), np.deg2rad(X[:, 1])
        return self.radius * np.stack(
            [np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=1
        )


_NU = {"matern12": 0.5, "matern32": 1.5, "matern52": 2.5}


def _nu_key(nu) -> str:
    if isinstance(nu, str):
        if nu in _NU:
            return nu
        num, _, den = nu.partition("/")
        nu = float(num) / float(den or 1)
    for key, value in _NU.items():
        if math.isclose(float(nu), value):
            return key
    raise ValueError(f"unsupported Matern smoothness {nu!r}; expected 1/2, 3/2 or 5/2")


def matern(r: np.ndarray, nu: float, lengthscale: float, output_scale: float = 1.0) -> np.ndarray:
    """Closed-form half-integer Matern covariance as a function of distance."""
    key = _nu_key(nu)
    r = np.abs(np.asarray(r, dtype=float))
    s2 = output_scale**2
    if key == "matern12":
        return s2 * np.exp(-r / lengthscale)
    if key == "matern32":
        a = math.sqrt(3.0) * r / lengthscale
        return s2 * (1.0 + a) * np.exp(-a)
    a = math.sqrt(5.0) * r / lengthscale
    return s2 * (1.0 + a + a * a / 3.0) * np.exp(-a)


@dataclass(frozen=True)
class Kernel:
    """Half-integer Matern kernel on a Euclidean space or a sphere."""

    nu: float = 1.5
    lengthscale: float = 1.0
    output_scale: float = 1.0
    geometry: Euclidean | Sphere = field(default_factory=Euclidean)

    def __post_init__(self):
        object.__setattr__(self, "nu", _NU[_nu_key(self.nu)])
        if self.lengthscale <= 0:
            raise ValueError("lengthscale must be positive")
        if self.output_scale < 0:
            raise ValueError("output_scale must be nonnegative")

    def _dist(self, A, B, pairwise=False):
        A = self.geometry.embed(self.geometry.check(A))
        B = self.geometry.embed(self.geometry.check(B))
        if pairwise:
            return np.linalg.norm(A - B, axis=1)
        # difference form: the expanded |a|^2 + |b|^2 - 2ab cancels badly near a == b
        return cdist(A, B)

    def matrix(self, A, B) -> np.ndarray:
        return matern(self._dist(A, B), self.nu, self.lengthscale, self.output_scale)

    def pairwise(self, A, B) -> np.ndarray:
        return matern(self._dist(A, B, pairwise=True), self.nu, self.lengthscale, self.output_scale)

    def __call__(self, x, y) -> float:
        x = np.atleast_1d(np.asarray(x, float))[None, :]
        y = np.atleast_1d(np.asarray(y, float))[None, :]
        return float(self.matrix(x, y)[0, 0])

    def gram(self, X1, X2=None, row_block: int = linops.DEFAULT_ROW_BLOCK) -> GramMap:
        return GramMap(self, X1, X2, row_block=row_block)


def gram(k: Kernel, X, X2=None) -> GramMap:
    return k.gram(X, X2)


# --- continuous-time Gauss-Markov processes ----------------------------------


class ContinuousGmp:
    """Interface: ``transition(t, s) -> (A, b, Q)`` and ``marginal(t) -> (mean, cov)``."""

    state_dim: int

    def transition(self, t: float, s: float):
        raise NotImplementedError

    def marginal(self, t: float):
        raise NotImplementedError


@dataclass
class TemporalGmp(ContinuousGmp):
    """Stationary linear SDE ``du = F u dt + L dW`` started in its stationary law."""

    drift: np.ndarray
    stationary_cov: np.ndarray
    mean: np.ndarray | None = None
    closed_form: Callable[[float], np.ndarray] | None = None

    def __post_init__(self):
        self.drift = np.atleast_2d(np.asarray(self.drift, float))
        self.state_dim = self.drift.shape[0]
        self.mean = np.zeros(self.state_dim) if self.mean is None else np.asarray(self.mean, float)

    @property
    def order(self) -> int:
        return self.state_dim

    def transition_matrix(self, dt: float) -> np.ndarray:
        if dt == 0:
            return np.eye(self.state_dim)
        if self.closed_form is not None:
            return self.closed_form(dt)
        return scipy.linalg.expm(self.drift * dt)

    def transition(self, t: float, s: float):
        A = self.transition_matrix(t - s)
        b = self.mean - A @ self.mean
        Q = self.stationary_cov - A @ self.stationary_cov @ A.T
        Q = 0.5 * (Q + Q.T)
        if t == s:
            b, Q = np.zeros(self.state_dim), np.zeros((self.state_dim,) * 2)
        return A, b, Q

    def marginal(self, t: float):
        return self.mean.copy(), self.stationary_cov.copy()

    def cross_cov(self, t: float, s: float) -> np.ndarray:
        """``Cov(u(t), u(s))``."""
        if t >= s:
            return self.transition_matrix(t - s) @ self.stationary_cov
        return self.stationary_cov @ self.transition_matrix(s - t).T


def _companion(nu_key: str, lam: float) -> np.ndarray:
    if nu_key == "matern12":
        return np.array([[-lam]])
    if nu_key == "matern32":
        return np.array([[0.0, 1.0], [-(lam**2), -2.0 * lam]])
    return np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-(lam**3), -3.0 * lam**2, -3.0 * lam]])


def matern_temporal_ssm(nu, lengthscale: float, output_scale: float = 1.0, mean=None) -> TemporalGmp:
    """State-space form of a half-integer Matern process and its time derivatives.

    The state is ``(f, f', ..., f^(p))`` with ``p = nu - 1/2``; the stationary
    covariance comes from the Lyapunov equation rescaled to variance
    ``output_scale**2``.
    """
    key = _nu_key(nu)
    if lengthscale <= 0:
        raise ValueError("lengthscale must be positive")
    if output_scale < 0:
        raise ValueError("output_scale must be nonnegative")
    nu = _NU[key]
    lam = math.sqrt(2 * nu) / lengthscale
    F = _companion(key, lam)
    d = F.shape[0]
    Lq = np.zeros((d, d))
    Lq[-1, -1] = 1.0
    P = scipy.linalg.solve_continuous_lyapunov(F, -Lq)
    P = 0.5 * (P + P.T)
    P *= output_scale**2 / P[0, 0]
    # exact zeros where the process is decoupled
    P[np.abs(P) < 1e-14 * np.abs(P).max()] = 0.0

    closed = None
    if key == "matern12":
        closed = lambda dt: np.array([[math.exp(-lam * dt)]])  # noqa: E731
    elif key == "matern32":
        def closed(dt):
            e = math.exp(-lam * dt)
            return e * np.array([[1.0 + lam * dt, dt], [-(lam**2) * dt, 1.0 - lam * dt]])
    if mean is not None:
        mean = np.asarray(mean, float)
        if mean.ndim == 0:
            mean = np.concatenate([[float(mean)], np.zeros(d - 1)])
    return TemporalGmp(F, P, mean=mean, closed_form=closed)


@dataclass
class SeparableGmp(ContinuousGmp):
    """Space-time separable Gauss-Markov process restricted to spatial points ``X``.

    State layout is component-major: index ``i * N_X + j`` holds the ``i``-th
    temporal derivative at spatial point ``X[j]``.
    """

    temporal: TemporalGmp
    kernel: Kernel
    X: np.ndarray
    spatial_mean: float | Callable | None = None
    row_block: int = linops.DEFAULT_ROW_BLOCK

    def __post_init__(self):
        self.X = self.kernel.geometry.check(self.X)
        if len(self.X) == 0:
            raise ValueError("X must contain at least one spatial point")
        if len(np.unique(self.X, axis=0)) != len(self.X):
            raise ValueError("duplicate spatial points in X")
        self.n_space = len(self.X)
        self.order = self.temporal.order
        self.state_dim = self.order * self.n_space
        self.gram = self.kernel.gram(self.X, row_block=self.row_block)
        if self.spatial_mean is None:
            self.mean_x = np.zeros(self.n_space)
        elif callable(self.spatial_mean):
            self.mean_x = np.asarray(self.spatial_mean(self.X), float).ravel()
        else:
            self.mean_x = np.full(self.n_space, float(self.spatial_mean))
        self._cov = KroneckerMap(self.temporal.stationary_cov, self.gram)
        self._identity = IdentityMap(self.n_space)
        self._sqrt = None
        self.sqrt_seconds = 0.0

    def transition(self, t: float, s: float):
        At, bt, Qt = self.temporal.transition(t, s)
        return (
            KroneckerMap(At, self._identity),
            np.kron(bt, self.mean_x),
            KroneckerMap(Qt, self.gram),
        )

    def marginal(self, t: float):
        mt, _ = self.temporal.marginal(t)
        return np.kron(mt, self.mean_x), self._cov

    def spatial_sqrt(self) -> np.ndarray:
        """Dense left square root of the spatial Gramian (cached, timed)."""
        if self._sqrt is None:
            start = time.perf_counter()
            self._sqrt = linops.psd_sqrt(self.gram.to_dense())
            self.sqrt_seconds = time.perf_counter() - start
        return self._sqrt

    def cov_sqrt(self, temporal_cov: np.ndarray) -> LinearMap:
        return KroneckerMap(linops.psd_sqrt(temporal_cov), self.spatial_sqrt())

    def zeroth_component(self, spatial_indices) -> SelectionMap:
        return SelectionMap(np.asarray(spatial_indices, dtype=int), self.state_dim)


# --- discrete-time models --------------------------------------------------


@dataclass
class DiscreteLgssm:
    """Linear-Gaussian state-space model on steps ``0..n``.

    ``A[k], b[k], Q[k]`` map step ``k`` to ``k + 1``; ``mu[k], Sigma[k]`` are the
    prior marginals. ``H[k], Lam[k], c[k]`` describe the observation at step
    ``k`` (``None`` at step 0 and at steps without a sensor). Observations passed
    to the filters are sequences of length ``n + 1`` with ``None`` for missing
    steps.
    """

    mu: list
    Sigma: list
    A: list
    b: list
    Q: list
    H: list
    Lam: list
    c: list | None = None
    times: np.ndarray | None = None
    gmp: ContinuousGmp | None = None
    init_sqrt: LinearMap | np.ndarray | None = None
    noise_sqrt: list | None = None

    def __post_init__(self):
        n = len(self.A)
        for name in ("b", "Q"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} must have {n} entries")
        for name in ("mu", "Sigma", "H", "Lam"):
            if len(getattr(self, name)) != n + 1:
                raise ValueError(f"{name} must have {n + 1} entries")
        if self.c is None:
            self.c = [None] * (n + 1)
        self.Sigma = [aslinearmap(S) for S in self.Sigma]
        self.A = [aslinearmap(A) for A in self.A]
        self.Q = [aslinearmap(Q) for Q in self.Q]
        self.H = [None if H is None else aslinearmap(H) for H in self.H]
        self.Lam = [None if L is None else aslinearmap(L) for L in self.Lam]
        self.mu = [np.asarray(m, float) for m in self.mu]
        self.b = [np.zeros(self.state_dim) if b is None else np.asarray(b, float) for b in self.b]

    @property
    def n(self) -> int:
        return len(self.A)

    @property
    def state_dim(self) -> int:
        return self.mu[0].size

    def offset(self, k: int) -> np.ndarray | float:
        return 0.0 if self.c[k] is None else np.asarray(self.c[k], float)

    def is_missing(self, k: int, observations) -> bool:
        if k == 0:
            return True
        y = observations[k]
        if y is None:
            return True
        if self.H[k] is None:
            raise ValueError(f"observation given at step {k} but the model has no sensor there")
        return False

    def check_observations(self, observations) -> list:
        obs = list(observations)
        if len(obs) != self.n + 1:
            raise ValueError(f"expected {self.n + 1} observation slots (step 0..n), got {len(obs)}")
        if obs[0] is not None:
            raise ValueError("step 0 carries no observation")
        return obs

    # sampling support
    def initial_sqrt(self) -> LinearMap:
        if self.init_sqrt is None:
            self.init_sqrt = linops.DenseMap(linops.psd_sqrt(self.Sigma[0]))
        return aslinearmap(self.init_sqrt)

    def process_noise_sqrt(self, k: int) -> LinearMap:
        if self.noise_sqrt is None:
            self.noise_sqrt = [None] * self.n
        if self.noise_sqrt[k] is None:
            self.noise_sqrt[k] = linops.DenseMap(linops.psd_sqrt(self.Q[k]))
        return aslinearmap(self.noise_sqrt[k])

    def sample_prior(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Trajectories from the prior, shape ``(n + 1, D)`` or ``(n + 1, D, size)``."""
        cols = 1 if size is None else size
        L0 = self.initial_sqrt()
        u = self.mu[0][:, None] + L0 @ rng.standard_normal((L0.cols, cols))
        out = [u]
        for k in range(self.n):
            Lq = self.process_noise_sqrt(k)
            u = self.A[k] @ u + self.b[k][:, None] + Lq @ rng.standard_normal((Lq.cols, cols))
            out.append(u)
        arr = np.stack(out)
        return arr[..., 0] if size is None else arr

    @classmethod
    def from_arrays(cls, mu0, Sigma0, A, b, Q, H, Lam, c=None) -> "DiscreteLgssm":
        """Dense model with prior marginals propagated by the moment recursion."""
        mu = [np.asarray(mu0, float)]
        Sig = [np.asarray(Sigma0, float)]
        for k in range(len(A)):
            Ak = np.asarray(A[k], float)
            mu.append(Ak @ mu[-1] + (0.0 if b[k] is None else np.asarray(b[k], float)))
            S = Ak @ Sig[-1] @ Ak.T + np.asarray(Q[k], float)
            Sig.append(0.5 * (S + S.T))
        return cls(mu=mu, Sigma=Sig, A=list(A), b=list(b), Q=list(Q), H=list(H), Lam=list(Lam), c=c)


def discretize_stsgmp(
    temporal: TemporalGmp,
    spatial_kernel: Kernel,
    X,
    times: Sequence[float],
    obs_indices=None,
    noise_var: float = 0.0,
    t0: float | None = None,
    spatial_mean=None,
    row_block: int = linops.DEFAULT_ROW_BLOCK,
) -> DiscreteLgssm:
    """Discretize a space-time separable Gauss-Markov prior on ``X`` at ``times``.

    Step ``k`` sits at ``times[k]`` (so step 0 is never observed) unless ``t0``
    is given, in which case step 0 sits at ``t0`` and step ``k`` at
    ``times[k - 1]``. ``obs_indices`` holds, per step ``1..n``, the spatial
    indices observed there (``None`` for no sensor); a single index array is
    shared by all steps. ``noise_var`` is the i.i.d. observation noise variance.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) == 0:
        raise ValueError("times must be a nonempty 1-D sequence")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    if t0 is not None:
        if t0 > times[0]:
            raise ValueError("t0 must not exceed the first time")
        grid = np.concatenate([[t0], times])
    else:
        grid = times
    gmp = SeparableGmp(temporal, spatial_kernel, X, spatial_mean=spatial_mean, row_block=row_block)
    n = len(grid) - 1

    mu, Sigma = [], []
    for t in grid:
        m, S = gmp.marginal(t)
        mu.append(m)
        Sigma.append(S)
    A, b, Q = [], [], []
    for k in range(n):
        Ak, bk, Qk = gmp.transition(grid[k + 1], grid[k])
        A.append(Ak)
        b.append(bk)
        Q.append(Qk)

    if obs_indices is None:
        per_step = [None] * n
    elif all(i is not None and np.ndim(i) == 0 for i in obs_indices):
        per_step = [np.asarray(obs_indices, int)] * n
    else:
        if len(obs_indices) != n:
            raise ValueError(f"obs_indices must have one entry per step 1..{n}")
        per_step = list(obs_indices)
    H, Lam = [None], [None]
    for idx in per_step:
        if idx is None:
            H.append(None)
            Lam.append(None)
        else:
            Hk = gmp.zeroth_component(idx)
            H.append(Hk)
            Lam.append(DiagonalMap(np.full(Hk.rows, float(noise_var))))
    return DiscreteLgssm(mu=mu, Sigma=Sigma, A=A, b=b, Q=Q, H=H, Lam=Lam, times=grid, gmp=gmp)


def structured_sqrts(model: DiscreteLgssm) -> DiscreteLgssm:
    """Attach Kronecker square roots of ``Sigma_0`` and ``Q_k`` (dense spatial factor)."""
    gmp = model.gmp
    if not isinstance(gmp, SeparableGmp):
        return model
    _, S0 = gmp.temporal.marginal(model.times[0])
    model.init_sqrt = gmp.cov_sqrt(S0)
    model.noise_sqrt = []
    cache = {}
    for k in range(model.n):
        dt = round(float(model.times[k + 1] - model.times[k]), 12)
        if dt not in cache:
            _, _, Qt = gmp.temporal.transition(model.times[k + 1], model.times[k])
            cache[dt] = gmp.cov_sqrt(Qt)
        model.noise_sqrt.append(cache[dt])
    return model
