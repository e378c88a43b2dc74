import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cakalman import gp_oracle as go
from cakalman.linops import NumericalError
from cakalman.models import Euclidean, Kernel, matern


def _matern_kernel(ell=0.7):
    k = Kernel(1.5, ell, 1.0, Euclidean(1))
    return lambda A, B: k.matrix(np.atleast_2d(A), np.atleast_2d(B))


def _problem(rng, N=5, noise=0.1):
    Z = np.sort(rng.uniform(0, 3, N))
    return go.BatchGpProblem(_matern_kernel(), Z, rng.standard_normal(N), noise)


def test_noiseless_single_point_interpolates():
    p = go.BatchGpProblem(_matern_kernel(), [0.3], [1.7], 0.0)
    post = go.gp_posterior(p, [[0.3]])
    np.testing.assert_allclose(post.mean, [1.7])
    np.testing.assert_allclose(post.var, [0.0], atol=1e-14)


def test_far_query_reverts_to_prior():
    p = go.BatchGpProblem(_matern_kernel(0.1), [0.0, 0.1], [1.0, -2.0], 0.01)
    post = go.gp_posterior(p, [[50.0]])
    np.testing.assert_allclose(post.mean, [0.0], atol=1e-12)
    np.testing.assert_allclose(post.var, [1.0], atol=1e-12)


def test_posterior_matches_independent_dense_formula(rng):
    p = _problem(rng)
    Zq = np.linspace(-0.5, 3.5, 7)[:, None]
    K = np.array([[matern(abs(a - b), 1.5, 0.7) for b in p.Z[:, 0]] for a in p.Z[:, 0]])
    Kq = np.array([[matern(abs(a - b), 1.5, 0.7) for b in p.Z[:, 0]] for a in Zq[:, 0]])
    Kqq = np.array([[matern(abs(a - b), 1.5, 0.7) for b in Zq[:, 0]] for a in Zq[:, 0]])
    Kinv = np.linalg.inv(K + 0.1 * np.eye(len(K)))
    post = go.gp_posterior(p, Zq)
    np.testing.assert_allclose(post.mean, Kq @ Kinv @ p.y, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(post.cov, Kqq - Kq @ Kinv @ Kq.T, atol=1e-12)


def test_singular_system_raises():
    p = go.BatchGpProblem(_matern_kernel(), [0.0, 0.0], [1.0, 1.0], 0.0)
    with pytest.raises(NumericalError):
        go.gp_posterior(p, [[0.5]])


def test_itergp_identity_actions_equal_exact(rng):
    p = _problem(rng)
    Zq = rng.uniform(0, 3, (6, 1))
    a, b = go.itergp_posterior(p, np.eye(5), Zq), go.gp_posterior(p, Zq)
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-10)
    np.testing.assert_allclose(a.cov, b.cov, atol=1e-10)


def test_itergp_single_action_conditions_on_first_datum(rng):
    p = _problem(rng)
    Zq = rng.uniform(0, 3, (4, 1))
    one = go.BatchGpProblem(p.kernel, p.Z[:1], p.y[:1], p.noise_var)
    a = go.itergp_posterior(p, np.eye(5)[:, :1], Zq)
    b = go.gp_posterior(one, Zq)
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-12)
    np.testing.assert_allclose(a.cov, b.cov, atol=1e-12)


def test_itergp_pinv_handles_dependent_actions(rng):
    p = _problem(rng)
    S = np.eye(5)[:, :2]
    S_dup = np.column_stack([S, S[:, 0]])
    Zq = rng.uniform(0, 3, (3, 1))
    a, b = go.itergp_posterior(p, S, Zq), go.itergp_posterior(p, S_dup, Zq)
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_itergp_variance_sandwich(seed, m):
    rng = np.random.default_rng(seed)
    p = _problem(rng, N=6)
    S = rng.standard_normal((6, m))
    Zq = rng.uniform(-1, 4, (5, 1))
    v_s = go.itergp_posterior(p, S, Zq).var
    v_exact = go.gp_posterior(p, Zq).var
    assert np.all(v_exact <= v_s + 1e-10)
    assert np.all(v_s <= 1.0 + 1e-10)


def test_rkhs_norm_single_center():
    p = go.BatchGpProblem(_matern_kernel(), [0.0], [0.0], 0.25)
    assert go.rkhs_norm(p, [1.0], [[1.0]]) == pytest.approx(np.sqrt(1.25))


def test_rkhs_norm_homogeneous_and_dense(rng):
    p = _problem(rng)
    c, centers = rng.standard_normal(4), rng.uniform(0, 3, (4, 1))
    assert go.rkhs_norm(p, c, centers) == pytest.approx(go.rkhs_norm(p, -c, centers))
    K = p.kernel(centers, centers) + p.noise_var * np.eye(4)
    assert go.rkhs_norm(p, c, centers) ** 2 == pytest.approx(c @ K @ c, rel=1e-12)


def test_worst_case_bound_and_attainment(rng):
    p = _problem(rng, N=6)
    S = rng.standard_normal((6, 3))
    C = go.representer_matrix(p, S)
    for z in rng.uniform(-0.5, 3.5, 5):
        zq = np.array([[z]])
        var = go.itergp_posterior(p, S, zq).var[0]
        bound = np.sqrt(var + p.noise_var)
        for _ in range(10):
            centers = rng.uniform(-1, 4, (4, 1))
            coeffs = rng.standard_normal(4)
            y_fn = lambda Q: go.expansion_eval(p, coeffs, centers, Q)  # noqa: E731
            err = abs(y_fn(zq)[0] - p.kernel(zq, p.Z)[0] @ C @ y_fn(p.Z))
            assert err <= go.rkhs_norm(p, coeffs, centers) * bound + 1e-8
        centers, coeffs = go.worst_case_expansion(p, zq, S)
        y_fn = lambda Q: go.expansion_eval(p, coeffs, centers, Q)  # noqa: E731
        err = abs(y_fn(zq)[0] - p.kernel(zq, p.Z)[0] @ C @ y_fn(p.Z))
        assert go.rkhs_norm(p, coeffs, centers) == pytest.approx(1.0)
        assert err >= (1 - 1e-6) * bound


def test_space_time_kernel_product():
    spatial = Kernel(2.5, 2.0, 1.0, Euclidean(1))
    k = go.space_time_kernel(1.5, 0.5, 1.3, spatial)
    Z1, Z2 = np.array([[0.1, 0.2]]), np.array([[0.4, 1.0]])
    expected = matern(0.3, 1.5, 0.5, 1.3) * matern(0.8, 2.5, 2.0)
    np.testing.assert_allclose(k(Z1, Z2), [[expected]])


def test_block_diagonal_actions_shape():
    S = go.block_diagonal_actions([np.ones((2, 1)), np.eye(3)[:, :2]])
    assert S.shape == (5, 3)
    assert np.all(S[:2, 1:] == 0) and np.all(S[2:, :1] == 0)


def test_oracle_size_cap():
    with pytest.raises(ValueError):
        go.BatchGpProblem(_matern_kernel(), np.zeros(go.MAX_ORACLE_SIZE + 1), np.zeros(go.MAX_ORACLE_SIZE + 1), 0.1)
