"""Computation-aware Kalman filter.

The update conditions on a few projections ``S^T y`` of each observation,
chosen by a policy, and stores the belief as ``N(m, Sigma_k - M M^T)`` with a
tall factor ``M`` that is truncated to a fixed rank after every step. Only
products with ``Sigma_k``, ``A_k``, ``H_k`` and ``Lam_k`` are needed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .linops import DowndateMap, LinearMap, aslinearmap, empty_factor, truncate_downdate
from .models import DiscreteLgssm

GRAM_FLOOR = 1e-12
EIG_RTOL = 1e-12


# --- policies and stopping -------------------------------------------------


class Policy:
    """Chooses the action for iteration ``i`` of the update at a given step.

    ``kind`` is one of ``cg_residual``, ``coordinate``, ``random_gaussian`` or
    ``fixed``. Only ``cg_residual`` depends on the current residual, so it has
    no batch form.
    """

    KINDS = ("cg_residual", "coordinate", "random_gaussian", "fixed")

    def __init__(self, kind: str, sequence: Sequence[int] | None = None, seed: int | None = None,
                 actions: dict | Sequence | None = None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown policy kind {kind!r}; expected one of {self.KINDS}")
        if kind == "random_gaussian" and seed is None:
            raise ValueError("random_gaussian policy needs a seed")
        if kind == "fixed" and actions is None:
            raise ValueError("fixed policy needs per-step action matrices")
        self.kind = kind
        self.sequence = None if sequence is None else [int(j) for j in sequence]
        self.seed = seed
        self.actions = actions

    def __repr__(self) -> str:
        return f"Policy({self.kind!r})"

    def __call__(self, i: int, residual: np.ndarray, step: int = 0) -> np.ndarray:
        N = len(residual)
        if self.kind == "cg_residual":
            return np.array(residual, dtype=float, copy=True)
        if self.kind == "coordinate":
            j = i if self.sequence is None else self.sequence[i % len(self.sequence)]
            if not 0 <= j < N:
                raise ValueError(f"coordinate {j} outside [0, {N})")
            e = np.zeros(N)
            e[j] = 1.0
            return e
        if self.kind == "random_gaussian":
            return np.random.default_rng([self.seed, step, i]).standard_normal(N)
        S = self.step_actions(step)
        if i >= S.shape[1]:
            raise IndexError(f"fixed policy has only {S.shape[1]} actions at step {step}")
        return S[:, i].copy()

    def step_actions(self, step: int) -> np.ndarray:
        S = self.actions[step]
        S = np.asarray(S, float)
        return S[:, None] if S.ndim == 1 else S

    def batch(self, step: int, n_obs: int, count: int) -> np.ndarray:
        """All ``count`` actions at once (not available for residual-driven policies)."""
        if self.kind == "cg_residual":
            raise ValueError("cg_residual actions depend on the iterate and have no batch form")
        if self.kind == "fixed":
            return self.step_actions(step)[:, :count]
        dummy = np.zeros(n_obs)
        cols = [self(i, dummy, step) for i in range(count)]
        return np.column_stack(cols) if cols else np.zeros((n_obs, 0))

    def max_actions(self, step: int, n_obs: int) -> int:
        if self.kind == "fixed":
            return self.step_actions(step).shape[1]
        return n_obs


def make_policy(kind: str, **params) -> Policy:
    return Policy(kind, **params)


@dataclass(frozen=True)
class StoppingRule:
    max_iterations: int | None = None
    atol: float = 0.0
    rtol: float = 1e-10

    def budget(self, n_obs: int) -> int:
        return n_obs if self.max_iterations is None else min(int(self.max_iterations), n_obs)

    def converged(self, res_norm: float, res0_norm: float) -> bool:
        return res_norm <= self.atol + self.rtol * res0_norm


# --- update steps -----------------------------------------------------------


@dataclass
class UpdateResult:
    m: np.ndarray
    M: np.ndarray
    w: np.ndarray
    W: np.ndarray
    V: np.ndarray  # observation-space factor, V V^T = S (S^T G S)^+ S^T
    S: np.ndarray
    residual_history: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    @property
    def n_actions(self) -> int:
        return self.S.shape[1]


def _prep(m_pred, M_pred, Sigma, H, Lam, y, c):
    P_pred = DowndateMap(Sigma, M_pred)
    H, Lam = aslinearmap(H), aslinearmap(Lam)
    r0 = np.asarray(y, float) - (H @ m_pred) - c
    return P_pred, H, Lam, r0


def cakf_update_batch(m_pred, M_pred, Sigma: LinearMap, H, Lam, y, S, c=0.0) -> UpdateResult:
    """Condition on ``S^T y`` in one shot via a symmetric eigendecomposition."""
    P_pred, H, Lam, r0 = _prep(m_pred, M_pred, Sigma, H, Lam, y, c)
    S = np.asarray(S, float)
    if S.ndim == 1:
        S = S[:, None]
    D = len(m_pred)
    flags = []
    if S.shape[1] == 0:
        return UpdateResult(m_pred.copy(), M_pred, np.zeros(D), empty_factor(D), np.zeros((len(r0), 0)), S,
                            [float(np.linalg.norm(r0))], flags)
    HtS = H.T @ S
    PHtS = P_pred @ HtS
    G = HtS.T @ PHtS + S.T @ (Lam @ S)
    G = 0.5 * (G + G.T)
    e, U = np.linalg.eigh(G)
    keep = e > EIG_RTOL * max(e.max(initial=0.0), np.finfo(float).tiny)
    if not np.all(keep):
        flags.append("pseudo_inverse")
    Vc = U[:, keep] / np.sqrt(e[keep])
    coef = Vc @ (Vc.T @ (S.T @ r0))
    m = m_pred + PHtS @ coef
    M = np.hstack([M_pred, PHtS @ Vc])
    w = HtS @ coef
    W = HtS @ Vc
    V = S @ Vc
    r = r0 - (H @ (PHtS @ coef) + Lam @ (S @ coef))
    return UpdateResult(m, M, w, W, V, S, [float(np.linalg.norm(r0)), float(np.linalg.norm(r))], flags)


def cakf_update_iterative(m_pred, M_pred, Sigma: LinearMap, H, Lam, y, policy: Policy,
                          stopping: StoppingRule = StoppingRule(), c=0.0, step: int = 0) -> UpdateResult:
    """Sequential-action update; actions are G-orthonormalized as they arrive.

    Each iteration costs one product with the predictive covariance. An action
    that is numerically dependent on the previous ones under ``G`` is rejected
    but still counts toward the iteration budget.
    """
    P_pred, H, Lam, r0 = _prep(m_pred, M_pred, Sigma, H, Lam, y, c)
    D, N = len(m_pred), len(r0)
    budget = min(stopping.budget(N), policy.max_actions(step, N))
    r = r0.copy()
    res0 = float(np.linalg.norm(r0))
    history = [res0]
    flags = []
    V, GV, PV, coef = [], [], [], []
    actions = []
    i = 0
    while i < budget and not stopping.converged(history[-1], res0):
        s = np.asarray(policy(i, r, step), float)
        actions.append(s)
        i += 1
        if not np.any(s):
            flags.append(f"zero_action@{i - 1}")
            history.append(history[-1])
            continue
        Hts = H.T @ s
        d, Pd = s.copy(), P_pred @ Hts
        Gd = H @ Pd + Lam @ s
        sGs = float(s @ Gd)
        if V:
            Vm, GVm, PVm = np.column_stack(V), np.column_stack(GV), np.column_stack(PV)
            # two passes of G-orthogonalization against accepted directions
            for _ in range(2):
                coeff = GVm.T @ d
                d = d - Vm @ coeff
                Gd = Gd - GVm @ coeff
                Pd = Pd - PVm @ coeff
        eta = float(d @ Gd)
        if not sGs > 0 or eta <= GRAM_FLOOR * sGs:
            flags.append(f"rejected_action@{i - 1}")
            history.append(history[-1])
            continue
        alpha = float(d @ r)
        r = r - (alpha / eta) * Gd
        root = np.sqrt(eta)
        V.append(d / root)
        GV.append(Gd / root)
        PV.append(Pd / root)
        coef.append(alpha / root)
        history.append(float(np.linalg.norm(r)))
    if any(f.startswith("rejected") for f in flags):
        warnings.warn(f"step {step}: {sum(f.startswith('rejected') for f in flags)} dependent action(s) rejected",
                      RuntimeWarning, stacklevel=2)
    Vm = np.column_stack(V) if V else np.zeros((N, 0))
    PVm = np.column_stack(PV) if PV else empty_factor(D)
    # the iterate is v = V coef; P^- H^T v comes from stored columns
    cvec = np.asarray(coef)
    m = m_pred + PVm @ cvec if V else m_pred.copy()
    w = H.T @ (Vm @ cvec) if V else np.zeros(D)
    W = H.T @ Vm if V else empty_factor(D)
    S = np.column_stack(actions) if actions else np.zeros((N, 0))
    return UpdateResult(m, np.hstack([M_pred, PVm]), w, W, Vm, S, history, flags)


# --- filter -------------------------------------------------------------------


TruncationSchedule = int | Callable[[int, np.ndarray], int] | None


@dataclass
class CakfTrace:
    """Per-step filter output.

    ``M_kept[k]`` is the truncated factor that is propagated; ``M_dropped[k]``
    holds the removed columns, so ``(M_kept | M_dropped)`` is the untruncated
    factor. ``V[k]`` is the observation-space factor of the update.
    """

    model: DiscreteLgssm
    observations: list
    m_pred: list
    m: list
    M_kept: list
    M_dropped: list
    w: list
    W: list
    V: list
    S: list
    residual_history: list
    flags: list
    truncation_rank: int | None
    peak_factor_columns: int = 0

    @property
    def n(self) -> int:
        return len(self.m) - 1

    @property
    def means(self) -> np.ndarray:
        return np.stack(self.m)

    def observed(self, k: int) -> bool:
        return self.W[k] is not None

    def M_hat(self, k: int) -> np.ndarray:
        if self.M_dropped[k].shape[1] == 0:
            return self.M_kept[k]
        return np.hstack([self.M_kept[k], self.M_dropped[k]])

    def M_pred(self, k: int) -> np.ndarray:
        if k == 0:
            return empty_factor(self.model.state_dim)
        prev = self.M_kept[k - 1]
        return self.model.A[k - 1] @ prev if prev.shape[1] else prev

    def cov_op(self, k: int, which: str = "truncated") -> DowndateMap:
        """Covariance operator at step ``k``: ``truncated``, ``untruncated`` or ``predicted``."""
        factor = {"truncated": lambda: self.M_kept[k], "untruncated": lambda: self.M_hat(k),
                  "predicted": lambda: self.M_pred(k)}[which]()
        return DowndateMap(self.model.Sigma[k], factor)

    def variances(self, k: int, which: str = "truncated") -> np.ndarray:
        return self.cov_op(k, which).diagonal()

    def actions_taken(self) -> list:
        return [0 if S is None else S.shape[1] for S in self.S]


def resolve_truncation(schedule: TruncationSchedule, stopping: StoppingRule):
    """Constant bound ``2 * max_iterations`` unless overridden; ``None`` means no truncation."""
    if schedule is None:
        if stopping.max_iterations is None:
            return None
        return 2 * int(stopping.max_iterations)
    return schedule


def cakf_filter(
    model: DiscreteLgssm,
    observations,
    policy: Policy | str = "cg_residual",
    stopping: StoppingRule | None = None,
    truncation_rank: TruncationSchedule = None,
    update: str = "iterative",
    no_truncation: bool = False,
) -> CakfTrace:
    """Run the computation-aware filter over all steps.

    ``truncation_rank`` is an int, a callable ``(k, M_hat) -> int`` or ``None``
    for the default ``2 * stopping.max_iterations``; ``no_truncation`` disables
    truncation altogether.
    """
    obs = model.check_observations(observations)
    if isinstance(policy, str):
        policy = make_policy(policy)
    stopping = StoppingRule() if stopping is None else stopping
    if update not in ("iterative", "batch"):
        raise ValueError("update must be 'iterative' or 'batch'")
    schedule = None if no_truncation else resolve_truncation(truncation_rank, stopping)
    D = model.state_dim

    m = model.mu[0].copy()
    M = empty_factor(D)
    tr = CakfTrace(model, obs, [m], [m], [M], [empty_factor(D)], [None], [None], [None], [None], [None], [[]],
                   schedule if isinstance(schedule, int) else None)
    peak = 0
    for k in range(1, model.n + 1):
        m_pred = model.A[k - 1] @ m + model.b[k - 1]
        M_pred = model.A[k - 1] @ M if M.shape[1] else empty_factor(D)
        tr.m_pred.append(m_pred)
        if model.is_missing(k, obs):
            m, M_hat = m_pred, M_pred
            res = None
        else:
            args = (m_pred, M_pred, model.Sigma[k], model.H[k], model.Lam[k], obs[k])
            if update == "batch":
                N = len(obs[k])
                S = policy.batch(k, N, min(stopping.budget(N), policy.max_actions(k, N)))
                res = cakf_update_batch(*args, S, c=model.offset(k))
            else:
                res = cakf_update_iterative(*args, policy, stopping, c=model.offset(k), step=k)
            m, M_hat = res.m, res.M
        peak = max(peak, M_hat.shape[1])
        if schedule is None:
            M, dropped = M_hat, empty_factor(D)
        else:
            bound = schedule(k, M_hat) if callable(schedule) else schedule
            M, dropped = truncate_downdate(M_hat, bound)
        tr.m.append(m)
        tr.M_kept.append(M)
        tr.M_dropped.append(dropped)
        tr.w.append(None if res is None else res.w)
        tr.W.append(None if res is None else res.W)
        tr.V.append(None if res is None else res.V)
        tr.S.append(None if res is None else res.S)
        tr.residual_history.append(None if res is None else res.residual_history)
        tr.flags.append([] if res is None else res.flags)
    tr.peak_factor_columns = peak
    return tr
