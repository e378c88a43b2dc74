"""Matrix-free linear operators.

Every operator exposes ``shape`` and ``@`` for vectors and blocks of column
vectors, plus ``.T`` for the adjoint. Kernel Gramians, Kronecker products and
downdated covariances never materialize their dense matrix; ``to_dense`` exists
for small-scale testing and is tracked by :func:`allocation_monitor`.
"""

from __future__ import annotations

import contextlib
import warnings
from dataclasses import dataclass, field

import numpy as np

DEFAULT_ROW_BLOCK = 512


class DimensionError(ValueError):
    """Operand shape does not match the operator."""


class DenseAllocationError(RuntimeError):
    """An operator tried to materialize a matrix above the monitored limit."""


class NumericalError(ArithmeticError):
    """A linear system was singular or a factorization failed beyond recovery."""


@dataclass
class _Monitor:
    limit: int | None
    largest: int = 0
    count: int = 0


_MONITORS: list[_Monitor] = []


@contextlib.contextmanager
def allocation_monitor(limit: int | None = None):
    """Record the largest array materialized by operator internals.

    If ``limit`` is given, any materialization with at least ``limit`` entries
    raises :class:`DenseAllocationError`.
    """
    mon = _Monitor(limit)
    _MONITORS.append(mon)
    try:
        yield mon
    finally:
        _MONITORS.remove(mon)


def _record(n_entries: int) -> None:
    for mon in _MONITORS:
        mon.count += 1
        mon.largest = max(mon.largest, n_entries)
        if mon.limit is not None and n_entries >= mon.limit:
            raise DenseAllocationError(
                f"materialization of {n_entries} entries exceeds limit {mon.limit}"
            )


class LinearMap:
    """Base class for a matrix known through products with blocks of vectors."""

    shape: tuple[int, int]

    def _matmat(self, V: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _rmatmat(self, V: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def rows(self) -> int:
        return self.shape[0]

    @property
    def cols(self) -> int:
        return self.shape[1]

    def _check(self, v: np.ndarray, n: int) -> tuple[np.ndarray, bool]:
        v = np.asarray(v, dtype=float)
        if v.ndim not in (1, 2) or v.shape[0] != n:
            raise DimensionError(
                f"operator of shape {self.shape} cannot act on operand of shape {v.shape}"
            )
        return (v[:, None], True) if v.ndim == 1 else (v, False)

    def apply(self, v: np.ndarray) -> np.ndarray:
        V, vec = self._check(v, self.cols)
        out = self._matmat(V)
        return out[:, 0] if vec else out

    def adjoint_apply(self, v: np.ndarray) -> np.ndarray:
        V, vec = self._check(v, self.rows)
        out = self._rmatmat(V)
        return out[:, 0] if vec else out

    def __matmul__(self, v):
        if isinstance(v, LinearMap):
            return ComposedMap(self, v)
        return self.apply(v)

    def __rmatmul__(self, v):
        # v @ op == (op.T @ v.T).T
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            return self.adjoint_apply(v)
        return self.adjoint_apply(v.T).T

    @property
    def T(self) -> LinearMap:
        return AdjointMap(self)

    def __add__(self, other: LinearMap) -> LinearMap:
        return SumMap(self, aslinearmap(other))

    def __sub__(self, other: LinearMap) -> LinearMap:
        return SumMap(self, ScaledMap(aslinearmap(other), -1.0))

    def __mul__(self, alpha: float) -> LinearMap:
        return ScaledMap(self, float(alpha))

    __rmul__ = __mul__

    def to_dense(self) -> np.ndarray:
        _record(self.rows * self.cols)
        return self._matmat(np.eye(self.cols))

    def diagonal(self) -> np.ndarray:
        """Diagonal entries, probed one unit block at a time."""
        n = min(self.shape)
        out = np.empty(n)
        step = 64
        for start in range(0, n, step):
            idx = np.arange(start, min(start + step, n))
            E = np.zeros((self.cols, idx.size))
            E[idx, np.arange(idx.size)] = 1.0
            out[idx] = self._matmat(E)[idx, np.arange(idx.size)]
        return out

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape})"


class DenseMap(LinearMap):
    def __init__(self, matrix: np.ndarray):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        self.shape = self.matrix.shape

    def _matmat(self, V):
        return self.matrix @ V

    def _rmatmat(self, V):
        return self.matrix.T @ V

    def to_dense(self):
        return self.matrix.copy()

    def diagonal(self):
        return np.diag(self.matrix).copy()


class IdentityMap(LinearMap):
    def __init__(self, n: int):
        self.shape = (n, n)

    def _matmat(self, V):
        return V.copy()

    _rmatmat = _matmat

    def diagonal(self):
        return np.ones(self.shape[0])


class ZeroMap(LinearMap):
    def __init__(self, rows: int, cols: int | None = None):
        self.shape = (rows, rows if cols is None else cols)

    def _matmat(self, V):
        return np.zeros((self.rows, V.shape[1]))

    def _rmatmat(self, V):
        return np.zeros((self.cols, V.shape[1]))

    def diagonal(self):
        return np.zeros(min(self.shape))


class DiagonalMap(LinearMap):
    def __init__(self, diag):
        self.diag = np.asarray(diag, dtype=float).ravel()
        self.shape = (self.diag.size, self.diag.size)

    def _matmat(self, V):
        return self.diag[:, None] * V

    _rmatmat = _matmat

    def diagonal(self):
        return self.diag.copy()


class SelectionMap(LinearMap):
    """Rows of the identity: ``(S v) = v[indices]``."""

    def __init__(self, indices, n: int):
        self.indices = np.asarray(indices, dtype=int)
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= n):
            raise DimensionError("selection index out of range")
        self.shape = (self.indices.size, n)

    def _matmat(self, V):
        return V[self.indices]

    def _rmatmat(self, V):
        out = np.zeros((self.cols, V.shape[1]))
        np.add.at(out, self.indices, V)
        return out


class AdjointMap(LinearMap):
    def __init__(self, op: LinearMap):
        self.op = op
        self.shape = (op.cols, op.rows)

    def _matmat(self, V):
        return self.op._rmatmat(V)

    def _rmatmat(self, V):
        return self.op._matmat(V)

    @property
    def T(self):
        return self.op


class ComposedMap(LinearMap):
    """``left @ right``."""

    def __init__(self, left: LinearMap, right: LinearMap):
        if left.cols != right.rows:
            raise DimensionError(f"cannot compose {left.shape} with {right.shape}")
        self.left, self.right = left, right
        self.shape = (left.rows, right.cols)

    def _matmat(self, V):
        return self.left._matmat(self.right._matmat(V))

    def _rmatmat(self, V):
        return self.right._rmatmat(self.left._rmatmat(V))


def compose(*ops: LinearMap) -> LinearMap:
    out = aslinearmap(ops[0])
    for op in ops[1:]:
        out = ComposedMap(out, aslinearmap(op))
    return out


class SumMap(LinearMap):
    def __init__(self, *terms: LinearMap):
        shapes = {t.shape for t in terms}
        if len(shapes) != 1:
            raise DimensionError(f"cannot add operators of shapes {shapes}")
        self.terms = terms
        self.shape = terms[0].shape

    def _matmat(self, V):
        out = self.terms[0]._matmat(V)
        for t in self.terms[1:]:
            out = out + t._matmat(V)
        return out

    def _rmatmat(self, V):
        out = self.terms[0]._rmatmat(V)
        for t in self.terms[1:]:
            out = out + t._rmatmat(V)
        return out

    def diagonal(self):
        return sum(t.diagonal() for t in self.terms)


class ScaledMap(LinearMap):
    def __init__(self, op: LinearMap, alpha: float):
        self.op, self.alpha = op, alpha
        self.shape = op.shape

    def _matmat(self, V):
        return self.alpha * self.op._matmat(V)

    def _rmatmat(self, V):
        return self.alpha * self.op._rmatmat(V)

    def diagonal(self):
        return self.alpha * self.op.diagonal()


class KroneckerMap(LinearMap):
    """``left ⊗ right`` acting on row-major vectorizations.

    Index ``i * right.rows + j`` of the output corresponds to row ``i`` of
    ``left`` and row ``j`` of ``right``.
    """

    def __init__(self, left, right):
        self.left, self.right = aslinearmap(left), aslinearmap(right)
        p, q = self.left.shape
        m, n = self.right.shape
        self.shape = (p * m, q * n)

    def _kron(self, V, left, right):
        q, n = left.cols, right.cols
        r = V.shape[1]
        X = V.reshape(q, n, r)
        # right on axis 1
        Y = right._matmat(X.transpose(1, 0, 2).reshape(n, q * r))
        m = Y.shape[0]
        Y = Y.reshape(m, q, r).transpose(1, 0, 2).reshape(q, m * r)
        Z = left._matmat(Y)
        return Z.reshape(-1, r)

    def _matmat(self, V):
        return self._kron(V, self.left, self.right)

    def _rmatmat(self, V):
        return self._kron(V, AdjointMap(self.left), AdjointMap(self.right))

    def diagonal(self):
        if self.left.rows != self.left.cols or self.right.rows != self.right.cols:
            return super().diagonal()
        return np.kron(self.left.diagonal(), self.right.diagonal())


class GramMap(LinearMap):
    """Lazy kernel Gramian ``k(X1, X2)``; rows are generated in blocks on demand."""

    def __init__(self, kernel, X1, X2=None, row_block: int = DEFAULT_ROW_BLOCK):
        self.kernel = kernel
        self.X1 = kernel.geometry.check(X1)
        self.X2 = self.X1 if X2 is None else kernel.geometry.check(X2)
        self.symmetric = X2 is None
        self.row_block = int(row_block)
        self.shape = (len(self.X1), len(self.X2))

    def _product(self, A, B, V):
        out = np.empty((len(A), V.shape[1]))
        for start in range(0, len(A), self.row_block):
            stop = min(start + self.row_block, len(A))
            _record((stop - start) * len(B))
            out[start:stop] = self.kernel.matrix(A[start:stop], B) @ V
        return out

    def _matmat(self, V):
        return self._product(self.X1, self.X2, V)

    def _rmatmat(self, V):
        return self._product(self.X2, self.X1, V)

    def to_dense(self):
        _record(self.rows * self.cols)
        return self.kernel.matrix(self.X1, self.X2)

    def diagonal(self):
        n = min(self.shape)
        return self.kernel.pairwise(self.X1[:n], self.X2[:n])


class DowndateMap(LinearMap):
    """``prior - M M^T`` for a tall factor ``M`` (possibly with zero columns)."""

    def __init__(self, prior: LinearMap, factor: np.ndarray):
        self.prior = aslinearmap(prior)
        M = np.asarray(factor, dtype=float)
        if M.ndim == 1:
            M = M[:, None]
        if M.shape[0] != self.prior.rows:
            raise DimensionError(f"factor rows {M.shape[0]} != operator size {self.prior.rows}")
        self.factor = M
        self.shape = self.prior.shape

    def _matmat(self, V):
        out = self.prior._matmat(V)
        if self.factor.shape[1]:
            out -= self.factor @ (self.factor.T @ V)
        return out

    _rmatmat = _matmat

    def diagonal(self):
        return self.prior.diagonal() - np.einsum("ij,ij->i", self.factor, self.factor)


def aslinearmap(x) -> LinearMap:
    if isinstance(x, LinearMap):
        return x
    return DenseMap(x)


def dense(x) -> np.ndarray:
    """Dense matrix for an operator or array (testing / small scale only)."""
    return x.to_dense() if isinstance(x, LinearMap) else np.atleast_2d(np.asarray(x, float))


# --- downdate factors -----------------------------------------------------


def empty_factor(n: int) -> np.ndarray:
    return np.zeros((n, 0))


def truncate_downdate(M: np.ndarray, max_rank: int, rank_floor: float = 1e-12):
    """Split ``M`` into its top singular subspace and the remainder.

    Returns ``(kept, dropped)`` with ``kept @ kept.T + dropped @ dropped.T ==
    M @ M.T``. ``kept`` has at most ``max_rank`` columns; singular values below
    ``rank_floor * s_max`` are always moved to ``dropped``. A factor already
    within the bound is returned unchanged.
    """
    if max_rank < 0:
        raise ValueError("max_rank must be nonnegative")
    M = np.asarray(M, dtype=float)
    if M.shape[1] <= max_rank:
        return M, empty_factor(M.shape[0])
    # thin SVD of M rather than eigh(M M^T): avoids squaring the condition number
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    scaled = U * s
    if s.size == 0 or s[0] == 0.0:
        return empty_factor(M.shape[0]), scaled
    numerical_rank = int(np.sum(s > rank_floor * s[0]))
    keep = min(max_rank, numerical_rank)
    return scaled[:, :keep], scaled[:, keep:]


# --- square roots ---------------------------------------------------------


def psd_sqrt(cov, rank_floor: float = 0.0) -> np.ndarray:
    """Dense left square root ``L`` with ``L L^T = cov`` via eigendecomposition."""
    C = dense(cov)
    C = 0.5 * (C + C.T)
    w, U = np.linalg.eigh(C)
    w = np.clip(w, 0.0, None)
    if rank_floor > 0 and w.size:
        keep = w > rank_floor * w.max()
        U, w = U[:, keep], w[keep]
    return U * np.sqrt(w)


@dataclass
class LanczosResult:
    factor: np.ndarray
    breakdown: bool = False
    basis: np.ndarray = field(default=None, repr=False)
    restarts: int = 0


def lanczos_lsqrt(op, rank: int, seed_vector: np.ndarray, breakdown_tol: float = 1e-12,
                  restart: np.random.Generator | None = None):
    """Low-rank left square root of a symmetric PSD operator from a Krylov space.

    Runs ``rank`` Lanczos steps with full reorthogonalization from
    ``seed_vector`` and returns ``L`` with ``L L^T = (op Q)(Q^T op Q)^+ (op Q)^T``
    for the orthonormal Krylov basis ``Q``. This Nystrom form is dominated by
    ``op`` in the PSD order, exact on the Krylov space, and exact overall when
    ``rank`` reaches the dimension. On breakdown fewer columns are returned and
    ``breakdown`` is set.
    """
    op = aslinearmap(op)
    D = op.rows
    if not 1 <= rank <= D:
        raise ValueError(f"rank must lie in [1, {D}]")
    q = np.asarray(seed_vector, dtype=float).ravel()
    nrm = np.linalg.norm(q)
    if nrm == 0:
        raise ValueError("seed vector must be nonzero")
    Q = np.zeros((D, rank))
    AQ = np.zeros((D, rank))
    Q[:, 0] = q / nrm
    scale = None
    breakdown = False
    restarts = 0
    j = 0
    for j in range(rank):
        AQ[:, j] = op.apply(Q[:, j])
        if j + 1 == rank:
            break
        w = AQ[:, j].copy()
        # full reorthogonalization, applied twice
        for _ in range(2):
            w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        beta = np.linalg.norm(w)
        if scale is None:
            scale = max(np.linalg.norm(AQ[:, 0]), np.finfo(float).tiny)
        if beta <= breakdown_tol * scale:
            if restart is None:
                breakdown = True
                break
            # invariant subspace found; continue in its orthogonal complement
            w = restart.standard_normal(D)
            for _ in range(2):
                w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
            beta = np.linalg.norm(w)
            restarts += 1
        Q[:, j + 1] = w / beta
    k = j + 1
    Q, AQ = Q[:, :k], AQ[:, :k]
    T = Q.T @ AQ
    T = 0.5 * (T + T.T)
    w, U = np.linalg.eigh(T)
    keep = w > 1e-12 * max(w.max(initial=0.0), np.finfo(float).tiny)
    L = AQ @ (U[:, keep] / np.sqrt(w[keep]))
    if breakdown:
        warnings.warn(f"Lanczos breakdown after {k} of {rank} steps", RuntimeWarning, stacklevel=2)
    return LanczosResult(L, breakdown, Q, restarts)
