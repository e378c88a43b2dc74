import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cakalman import linops
from cakalman.linops import (
    DenseMap,
    DiagonalMap,
    DimensionError,
    DowndateMap,
    GramMap,
    IdentityMap,
    KroneckerMap,
    SelectionMap,
    ZeroMap,
    compose,
    lanczos_lsqrt,
    truncate_downdate,
)
from cakalman.models import Kernel


def _species(rng):
    k = Kernel(1.5, 0.7)
    X = rng.uniform(0, 3, 7)
    Y = rng.uniform(0, 3, 5)
    A = rng.standard_normal((4, 6))
    return {
        "dense": DenseMap(A),
        "identity": IdentityMap(5),
        "zero": ZeroMap(3, 4),
        "diagonal": DiagonalMap(rng.standard_normal(6)),
        "selection": SelectionMap([0, 2, 2, 5], 6),
        "adjoint": DenseMap(A).T,
        "composed": compose(DenseMap(A), DenseMap(rng.standard_normal((6, 3)))),
        "sum": DenseMap(A) + DenseMap(rng.standard_normal((4, 6))),
        "scaled": DenseMap(A) * 2.5,
        "kronecker": KroneckerMap(rng.standard_normal((2, 3)), rng.standard_normal((4, 2))),
        "gram": GramMap(k, X),
        "gram_rect": GramMap(k, X, Y),
        "downdate": DowndateMap(GramMap(k, X), rng.standard_normal((7, 2)) * 0.1),
    }


def test_identity_apply():
    np.testing.assert_array_equal(IdentityMap(3) @ np.array([1.0, 2, 3]), [1, 2, 3])


def test_downdate_example():
    op = DowndateMap(IdentityMap(3), np.array([[1.0], [0], [0]]))
    np.testing.assert_allclose(op @ np.ones(3), [0, 1, 1])


def test_kronecker_matches_dense(rng):
    A, B = rng.standard_normal((2, 2)), rng.standard_normal((3, 3))
    v = rng.standard_normal(6)
    np.testing.assert_allclose(KroneckerMap(A, B) @ v, np.kron(A, B) @ v, rtol=1e-12)


@pytest.mark.parametrize("shapes", [((2, 3), (4, 2)), ((3, 3), (4, 4)), ((1, 2), (3, 1)), ((4, 4), (3, 3))])
def test_kronecker_dense_agreement(rng, shapes):
    A, B = rng.standard_normal(shapes[0]), rng.standard_normal(shapes[1])
    op = KroneckerMap(A, B)
    full = np.kron(A, B)
    V = rng.standard_normal((op.cols, 3))
    W = rng.standard_normal((op.rows, 3))
    assert np.linalg.norm(op @ V - full @ V) <= 1e-12 * np.linalg.norm(full @ V)
    assert np.linalg.norm(op.T @ W - full.T @ W) <= 1e-12 * np.linalg.norm(full.T @ W)


def test_dimension_mismatch_raises():
    with pytest.raises(DimensionError):
        IdentityMap(3) @ np.ones(4)
    with pytest.raises(DimensionError):
        DenseMap(np.ones((2, 3))).T @ np.ones(3)


def test_adjoint_all_species(rng):
    for name, op in _species(rng).items():
        for _ in range(20):
            v, w = rng.standard_normal(op.cols), rng.standard_normal(op.rows)
            lhs, rhs = (op @ v) @ w, v @ (op.T @ w)
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs)), name


def test_linearity_all_species(rng):
    for name, op in _species(rng).items():
        v, w = rng.standard_normal(op.cols), rng.standard_normal(op.cols)
        a, b = 1.7, -0.3
        np.testing.assert_allclose(op @ (a * v + b * w), a * (op @ v) + b * (op @ w), atol=1e-12, err_msg=name)


def test_to_dense_agrees_with_apply(rng):
    for name, op in _species(rng).items():
        V = rng.standard_normal((op.cols, 4))
        np.testing.assert_allclose(op.to_dense() @ V, op @ V, atol=1e-12, err_msg=name)
        np.testing.assert_allclose(op.diagonal(), np.diag(op.to_dense()), atol=1e-12, err_msg=name)


def test_composition_associativity(rng):
    A, B, C = (DenseMap(rng.standard_normal(s)) for s in [(3, 4), (4, 5), (5, 2)])
    v = rng.standard_normal(2)
    ref = A @ (B @ (C @ v))
    for op in (compose(A, B, C), (A @ B) @ C, A @ (B @ C)):
        assert np.linalg.norm(op @ v - ref) <= 1e-12 * np.linalg.norm(ref)


def test_gram_matches_dense_and_is_lazy(rng):
    k = Kernel(2.5, 0.4, 1.3)
    X = rng.uniform(0, 2, 64)
    op = GramMap(k, X, row_block=16)
    V = rng.standard_normal((64, 3))
    np.testing.assert_allclose(op @ V, k.matrix(X, X) @ V, rtol=1e-12)
    with linops.allocation_monitor() as mon:
        op @ V
    assert mon.largest == 16 * 64


def test_allocation_monitor_limit():
    with linops.allocation_monitor(limit=100):
        with pytest.raises(linops.DenseAllocationError):
            IdentityMap(20).to_dense()


def test_truncate_within_bound_unchanged(rng):
    M = rng.standard_normal((6, 2))
    kept, dropped = truncate_downdate(M, 5)
    assert kept is M
    assert dropped.shape == (6, 0)


def test_truncate_example():
    M = np.array([[3.0, 0], [0, 2], [0, 0]])
    kept, dropped = truncate_downdate(M, 1)
    assert kept.shape == (3, 1)
    np.testing.assert_allclose(np.abs(kept[:, 0]), [3, 0, 0], atol=1e-14)
    assert np.isclose(np.sum(kept**2), 9)
    np.testing.assert_allclose(np.linalg.eigvalsh(dropped @ dropped.T)[-1], 4)


def test_truncate_eckart_young(rng):
    M = rng.standard_normal((8, 5))
    kept, dropped = truncate_downdate(M, 3)
    s = np.linalg.svd(M, compute_uv=False)
    err = np.linalg.norm(M @ M.T - kept @ kept.T)
    assert abs(err - np.linalg.norm(s[3:] ** 2)) <= 1e-10 * max(1, err)
    np.testing.assert_allclose(kept @ kept.T + dropped @ dropped.T, M @ M.T, atol=1e-12)


def test_truncate_rank_floor():
    M = np.array([[1.0, 1.0, 0], [1.0, 1.0, 0]])
    kept, dropped = truncate_downdate(M, 2)
    assert kept.shape[1] == 1
    np.testing.assert_allclose(kept @ kept.T + dropped @ dropped.T, M @ M.T, atol=1e-14)


def test_truncate_negative_rank():
    with pytest.raises(ValueError):
        truncate_downdate(np.ones((2, 2)), -1)


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    D=st.integers(1, 10),
    r=st.integers(0, 8),
    max_rank=st.integers(0, 8),
)
def test_truncate_conservative_property(seed, D, r, max_rank):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((D, r))
    kept, dropped = truncate_downdate(M, max_rank)
    assert kept.shape[1] <= max_rank
    # diag(Sigma - kept kept^T) >= diag(Sigma - M M^T)
    assert np.all(np.sum(kept**2, 1) <= np.sum(M**2, 1) + 1e-12)
    np.testing.assert_allclose(kept @ kept.T + dropped @ dropped.T, M @ M.T, atol=1e-10)


def test_lanczos_scalar():
    res = lanczos_lsqrt(DiagonalMap([4.0]), 1, np.ones(1))
    np.testing.assert_allclose(np.abs(res.factor), [[2.0]])
    assert not res.breakdown


def test_lanczos_full_rank(rng):
    B = rng.standard_normal((6, 6))
    S = B @ B.T + 0.5 * np.eye(6)
    L = lanczos_lsqrt(DenseMap(S), 6, rng.standard_normal(6)).factor
    assert np.linalg.norm(L @ L.T - S) <= 1e-8 * np.linalg.norm(S)


def test_lanczos_rank_one(rng):
    v = rng.standard_normal(5)
    L = lanczos_lsqrt(DenseMap(np.outer(v, v)), 1, rng.standard_normal(5)).factor
    np.testing.assert_allclose(L @ L.T, np.outer(v, v), atol=1e-10)


def test_lanczos_breakdown_flag(rng):
    v = rng.standard_normal(5)
    with pytest.warns(RuntimeWarning):
        res = lanczos_lsqrt(DenseMap(np.outer(v, v)), 3, rng.standard_normal(5))
    assert res.breakdown
    assert res.factor.shape[1] == 1


def test_lanczos_dominated_by_operator(rng):
    B = rng.standard_normal((10, 10))
    S = B @ B.T
    L = lanczos_lsqrt(DenseMap(S), 4, rng.standard_normal(10)).factor
    assert np.linalg.eigvalsh(S - L @ L.T).min() >= -1e-9 * np.trace(S)


def test_lanczos_restart_recovers_identity(rng):
    res = lanczos_lsqrt(IdentityMap(5), 5, rng.standard_normal(5), restart=np.random.default_rng(0))
    assert not res.breakdown and res.restarts == 4
    np.testing.assert_allclose(res.factor @ res.factor.T, np.eye(5), atol=1e-12)
