"""Shared test fixtures: random dense models and brute-force Gaussian conditioning."""

from __future__ import annotations

import numpy as np
import pytest

from cakalman.linops import dense
from cakalman.models import DiscreteLgssm


def random_spd(rng, n, scale=1.0, floor=0.1):
    B = rng.standard_normal((n, n))
    return scale * (B @ B.T / n + floor * np.eye(n))


def random_model(rng, D=4, n=5, obs_dims=2, missing=(), offset=False, contractive=True) -> DiscreteLgssm:
    """Dense random model; ``obs_dims`` is an int or a per-step list (index 1..n)."""
    A, b, Q = [], [], []
    for _ in range(n):
        M = rng.standard_normal((D, D))
        if contractive:
            M *= 0.9 / max(np.abs(np.linalg.eigvals(M)).max(), 1e-3)
        A.append(M)
        b.append(0.1 * rng.standard_normal(D))
        Q.append(random_spd(rng, D, 0.3))
    H, Lam, c = [None], [None], [None]
    dims = [obs_dims] * n if np.ndim(obs_dims) == 0 else list(obs_dims)
    for k in range(1, n + 1):
        Nk = dims[k - 1]
        if k in missing or Nk == 0:
            H.append(None)
            Lam.append(None)
            c.append(None)
            continue
        H.append(rng.standard_normal((Nk, D)))
        Lam.append(random_spd(rng, Nk, 0.2))
        c.append(0.3 * rng.standard_normal(Nk) if offset else None)
    return DiscreteLgssm.from_arrays(
        rng.standard_normal(D), random_spd(rng, D), A, b, Q, H, Lam, c=c
    )


def sample_observations(model: DiscreteLgssm, rng, truth=None):
    if truth is None:
        truth = model.sample_prior(rng)
    obs = [None]
    for k in range(1, model.n + 1):
        if model.H[k] is None:
            obs.append(None)
            continue
        H, Lam = dense(model.H[k]), dense(model.Lam[k])
        noise = np.linalg.cholesky(Lam + 1e-300 * np.eye(len(Lam))) @ rng.standard_normal(len(Lam)) if np.any(Lam) else 0.0
        obs.append(H @ truth[k] + model.offset(k) + noise)
    return obs


def joint_prior(model: DiscreteLgssm):
    """Mean and covariance of the stacked trajectory ``(u_0, ..., u_n)``."""
    n, D = model.n, model.state_dim
    mean = np.concatenate(model.mu)
    cov = np.zeros(((n + 1) * D,) * 2)
    Sig = [dense(S) for S in model.Sigma]
    A = [dense(a) for a in model.A]
    for i in range(n + 1):
        block = Sig[i]
        cov[i * D:(i + 1) * D, i * D:(i + 1) * D] = block
        for j in range(i + 1, n + 1):
            block = A[j - 1] @ block
            cov[j * D:(j + 1) * D, i * D:(i + 1) * D] = block
            cov[i * D:(i + 1) * D, j * D:(j + 1) * D] = block.T
    return mean, cov


def condition_joint(model: DiscreteLgssm, observations, upto=None):
    """Brute-force joint Gaussian conditioning on observed steps ``<= upto``."""
    n, D = model.n, model.state_dim
    upto = n if upto is None else upto
    mean, cov = joint_prior(model)
    rows, ys, noise_blocks = [], [], []
    for k in range(1, upto + 1):
        if observations[k] is None:
            continue
        H = dense(model.H[k])
        R = np.zeros((H.shape[0], (n + 1) * D))
        R[:, k * D:(k + 1) * D] = H
        rows.append(R)
        ys.append(np.asarray(observations[k]) - model.offset(k))
        noise_blocks.append(dense(model.Lam[k]))
    if not rows:
        return mean, cov
    R = np.vstack(rows)
    y = np.concatenate(ys)
    from scipy.linalg import block_diag

    S = R @ cov @ R.T + block_diag(*noise_blocks)
    K = np.linalg.solve(S, R @ cov).T
    post_mean = mean + K @ (y - R @ mean)
    post_cov = cov - K @ S @ K.T
    return post_mean, 0.5 * (post_cov + post_cov.T)


def block(x, k, D):
    if x.ndim == 1:
        return x[k * D:(k + 1) * D]
    return x[k * D:(k + 1) * D, k * D:(k + 1) * D]


def relerr(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# --- acceptance reporting --------------------------------------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, summary): acceptance criterion")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    number, summary = marker.args
    failed = call.excinfo is not None
    if call.when == "setup" and not failed:
        return
    prev = _CRITERIA.get(number, (summary, True))
    _CRITERIA[number] = (summary, prev[1] and not failed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        summary, ok = _CRITERIA[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {summary}")
