"""Posterior draws and off-grid queries from a budget-limited smoother.

The filter takes two actions per observed step and keeps a rank-3 factor.
Trajectory draws reproduce the smoother's moments, and the state at a time
between grid points is recovered without rerunning the filter.
"""

import numpy as np

from cakalman.cakf import StoppingRule, cakf_filter
from cakalman.caks import caks_interpolate, caks_smooth, cakf_interpolate, posterior_sample
from cakalman.models import Kernel, discretize_stsgmp, matern_temporal_ssm

rng = np.random.default_rng(1)
X = np.linspace(0.0, 2.0, 6)
times = np.linspace(0.0, 2.0, 9)
sensors = [np.array([0, 2, 5]) if k % 2 else None for k in range(1, len(times))]
model = discretize_stsgmp(matern_temporal_ssm(1.5, 0.6), Kernel(1.5, 0.8), X, times,
                          obs_indices=sensors, noise_var=0.05)
truth = model.sample_prior(rng)
obs = [None] + [truth[k][sensors[k - 1]] + np.sqrt(0.05) * rng.standard_normal(3) if sensors[k - 1] is not None
                else None for k in range(1, model.n + 1)]

tr = cakf_filter(model, obs, stopping=StoppingRule(max_iterations=2), truncation_rank=3)
sm = caks_smooth(tr, truncation_rank=None)

draws = posterior_sample(tr, rng_seed=0, size=4000)
k = 4
print("step", k, "field values")
print("  smoother mean ", np.round(sm.m[k][:len(X)], 3))
print("  sample mean   ", np.round(draws[k, :len(X)].mean(-1), 3))
print("  smoother std  ", np.round(np.sqrt(sm.variances(k)[:len(X)]), 3))
print("  sample std    ", np.round(draws[k, :len(X)].std(-1), 3))

t = 0.9
f, s = cakf_interpolate(t, tr), caks_interpolate(t, tr, sm)
print(f"t = {t}: filtered {np.round(f.mean[:len(X)], 3)}")
print(f"        smoothed {np.round(s.mean[:len(X)], 3)}")
