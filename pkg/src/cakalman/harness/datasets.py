"""Dataset generation and (de)serialization.

A dataset directory holds ``manifest.json``, ``observations.csv``,
``truth.csv`` and ``timing.json``. The first three are byte-identical across
runs with the same configuration; wall-clock timings live in the last one.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..models import (
    DiscreteLgssm,
    Euclidean,
    Kernel,
    Sphere,
    discretize_stsgmp,
    matern_temporal_ssm,
    structured_sqrts,
)
from .config import ConfigError, ExperimentConfig

MAX_DENSE_SPATIAL = 4096
FORMAT_VERSION = 1


class DatasetError(ConfigError):
    pass


def fmt(x: float) -> str:
    return "%.17g" % x


@dataclass
class Dataset:
    """Spatial points ``X``, time grid ``times`` (step 0 first) and per-step observations.

    ``obs_indices[k]`` and ``obs_values[k]`` are ``None`` at unobserved steps.
    ``truth`` has shape ``(n + 1, D)`` with the component-major state layout.
    """

    kind: str
    seed: int
    X: np.ndarray
    times: np.ndarray
    order: int
    obs_indices: list
    obs_values: list
    truth: np.ndarray
    train_space: np.ndarray
    test_space: np.ndarray
    t0_observable: bool = False
    sqrt_seconds: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.times) - 1

    @property
    def n_space(self) -> int:
        return len(self.X)

    @property
    def state_dim(self) -> int:
        return self.order * self.n_space

    @property
    def observations(self) -> list:
        return list(self.obs_values)

    def state_indices(self, split: str) -> np.ndarray:
        """State coordinates (all temporal components) at the spatial points of ``split``."""
        if split == "all":
            return np.arange(self.state_dim)
        space = {"train": self.train_space, "test": self.test_space}[split]
        return (np.arange(self.order)[:, None] * self.n_space + np.asarray(space)[None, :]).ravel()


# --- model construction ----------------------------------------------------


def _geometry(cfg: ExperimentConfig):
    s = cfg.model.spatial
    return Sphere(float(s.radius)) if s.geometry == "sphere" else Euclidean(int(s.dim))


def spatial_kernel(cfg: ExperimentConfig) -> Kernel:
    s = cfg.model.spatial
    return Kernel(float(s.nu), float(s.lengthscale), 1.0, _geometry(cfg))


def temporal_prior(cfg: ExperimentConfig):
    t = cfg.model.temporal
    return matern_temporal_ssm(float(t.nu), float(t.lengthscale), float(t.output_scale))


def build_model(cfg: ExperimentConfig, ds: Dataset) -> DiscreteLgssm:
    """Discretized prior on the dataset's grid with its sensor layout."""
    noise_var = float(cfg.model.noise_std) ** 2
    obs_idx = list(ds.obs_indices[1:])
    # a duplicated first time marks an observable initial time
    times = ds.times[1:] if ds.t0_observable else ds.times
    t0 = ds.times[0] if ds.t0_observable else None
    return discretize_stsgmp(temporal_prior(cfg), spatial_kernel(cfg), ds.X, times,
                             obs_indices=obs_idx, noise_var=noise_var, t0=t0)


# --- generators ----------------------------------------------------------------


def _grid_points(domain, n_per_dim: int, dim: int) -> np.ndarray:
    axis = np.linspace(float(domain[0]), float(domain[1]), int(n_per_dim))
    if dim == 1:
        return axis[:, None]
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.column_stack([g.ravel() for g in mesh])


def generate_onmodel(cfg: ExperimentConfig, seed: int | None = None) -> Dataset:
    """Sample a ground-truth trajectory from the discretized prior and noisy sensors."""
    d = cfg.data
    seed = int(d.seed if seed is None else seed)
    dim = int(cfg.model.spatial.dim)
    n_total = int(d.n_space) ** dim
    if n_total > MAX_DENSE_SPATIAL:
        raise DatasetError(
            f"spatial grid of {n_total} points exceeds the dense square-root limit of {MAX_DENSE_SPATIAL}"
        )
    X = _grid_points(d.domain, int(d.n_space), dim)
    n_steps = int(round(float(d.horizon) * int(d.steps_per_unit)))
    if n_steps < 1:
        raise DatasetError("time grid has no steps")
    times = np.arange(n_steps + 1) * (float(d.horizon) / n_steps)
    n_train_t = int(d.n_train_times) if d.n_train_times is not None else max(1, n_steps // 10)
    n_train_x = int(d.n_train_space) ** dim
    if n_train_t > n_steps or n_train_x > n_total:
        raise DatasetError("training subset larger than the grid")

    rng = np.random.default_rng(seed)
    time_rng = np.random.default_rng(0) if d.fixed_train_times else rng
    train_steps = np.sort(time_rng.choice(np.arange(1, n_steps + 1), n_train_t, replace=False))
    train_space = np.sort(rng.choice(n_total, n_train_x, replace=False))
    test_space = np.setdiff1d(np.arange(n_total), train_space)

    ds = Dataset("onmodel", seed, X, times, 0, [None] * (n_steps + 1), [None] * (n_steps + 1),
                 np.empty(0), train_space, test_space)
    model = structured_sqrts(build_model(cfg, _with_obs(ds, train_steps, train_space)))
    gmp = model.gmp
    truth = model.sample_prior(rng)
    lam = float(cfg.model.noise_std)
    values = [None] * (n_steps + 1)
    for k in train_steps:
        values[k] = truth[k, train_space] + lam * rng.standard_normal(len(train_space))
    ds = _with_obs(ds, train_steps, train_space)
    ds.obs_values = values
    ds.truth = truth
    ds.order = gmp.order
    ds.sqrt_seconds = gmp.sqrt_seconds
    return ds


def _with_obs(ds: Dataset, steps, space) -> Dataset:
    idx = [None] * (ds.n + 1)
    for k in steps:
        idx[int(k)] = np.asarray(space, int)
    ds.obs_indices = idx
    return ds


def target_function(t, x):
    """``sin(x) exp(-t)``."""
    return np.sin(x) * np.exp(-np.asarray(t, float))


def _union_sorted(*arrays, rtol: float = 1e-12) -> np.ndarray:
    """Sorted union that merges values equal up to rounding."""
    v = np.sort(np.concatenate([np.asarray(a, float).ravel() for a in arrays]))
    scale = max(np.abs(v).max(initial=0.0), 1.0)
    keep = np.concatenate([[True], np.diff(v) > rtol * scale])
    return v[keep]


def _nearest(grid: np.ndarray, values) -> np.ndarray:
    pos = np.clip(np.searchsorted(grid, values), 1, len(grid) - 1)
    left = grid[pos - 1]
    return np.where(np.abs(values - left) <= np.abs(grid[pos] - values), pos - 1, pos)


def generate_synthetic(cfg: ExperimentConfig, seed: int | None = None) -> Dataset:
    """Noisy samples of ``sin(x) exp(-t)`` on a regular train grid, evaluated on a finer grid.

    The state lives on the union of train and evaluation spatial points and
    time steps sit on the union of both time grids. Step 0 duplicates the first
    time so that data at that time can be conditioned on. ``holdout_fraction``
    withholds a regular subset of the training spatial points from observation.
    """
    d = cfg.data
    seed = int(d.seed if seed is None else seed)
    nt_tr, nx_tr = (int(v) for v in d.train_grid)
    nt_ev, nx_ev = (int(v) for v in d.eval_grid)
    t_tr = np.linspace(*map(float, d.time_domain), nt_tr)
    x_tr = np.linspace(*map(float, d.space_domain), nx_tr)
    t_ev = np.linspace(*map(float, d.time_domain), nt_ev)
    x_ev = np.linspace(*map(float, d.space_domain), nx_ev)
    X = _union_sorted(x_tr, x_ev)
    if len(X) > MAX_DENSE_SPATIAL:
        raise DatasetError(f"spatial grid of {len(X)} points exceeds {MAX_DENSE_SPATIAL}")
    grid = _union_sorted(t_tr, t_ev)
    times = np.concatenate([grid[:1], grid])
    train_pos = _nearest(X, x_tr)
    held = np.zeros(nx_tr, bool)
    if d.holdout_fraction is not None:
        stride = max(2, int(round(1.0 / float(d.holdout_fraction))))
        held[np.arange(nx_tr) % stride == stride // 2] = True
    observed_space = train_pos[~held]
    test_space = np.setdiff1d(np.arange(len(X)), observed_space)

    order = int(round(float(cfg.model.temporal.nu) + 0.5))
    truth = _derivative_truth(times, X, order)
    rng = np.random.default_rng(seed)
    lam = float(cfg.model.noise_std)
    idx, values = [None] * len(times), [None] * len(times)
    for t, k in zip(t_tr, _nearest(grid, t_tr) + 1):
        idx[k] = observed_space
        values[k] = target_function(t, X[observed_space]) + lam * rng.standard_normal(len(observed_space))
    return Dataset("synthetic", seed, X[:, None], times, order, idx, values, truth,
                   observed_space, test_space, t0_observable=True)


def _derivative_truth(times, X, order: int) -> np.ndarray:
    f = target_function(times[:, None], X[None, :])
    # d^i/dt^i of exp(-t) is (-1)^i exp(-t)
    return np.concatenate([(-1.0) ** i * f for i in range(order)], axis=1)


# --- serialization -------------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(ds: Dataset, out_dir, config: dict | None = None) -> Path:
    out = Path(out_dir)
    dim = ds.X.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step_index", "time"] + [f"x{i}" for i in range(dim)] + ["value"])
    for k in range(ds.n + 1):
        if ds.obs_indices[k] is None:
            continue
        for j, v in zip(ds.obs_indices[k], ds.obs_values[k]):
            w.writerow([k, fmt(ds.times[k])] + [fmt(c) for c in ds.X[j]] + [fmt(v)])
    _atomic_write(out / "observations.csv", buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step_index", "state_index", "value"])
    for k in range(ds.n + 1):
        for i, v in enumerate(ds.truth[k]):
            w.writerow([k, i, fmt(v)])
    _atomic_write(out / "truth.csv", buf.getvalue())

    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": ds.kind,
        "seed": ds.seed,
        "order": ds.order,
        "spatial_points": [[fmt(c) for c in row] for row in ds.X],
        "times": [fmt(t) for t in ds.times],
        "t0_observable": ds.t0_observable,
        "train_space": [int(i) for i in ds.train_space],
        "test_space": [int(i) for i in ds.test_space],
        "files": {"observations": "observations.csv", "truth": "truth.csv", "timing": "timing.json"},
        "config": config,
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _atomic_write(out / "timing.json", json.dumps({"spatial_sqrt_seconds": ds.sqrt_seconds}) + "\n")
    return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read dataset manifest in {root}: {exc}") from None
    files = manifest["files"]
    X = np.array([[float(c) for c in row] for row in manifest["spatial_points"]])
    times = np.array([float(t) for t in manifest["times"]])
    n = len(times) - 1
    lookup = {tuple(row): j for j, row in enumerate(X.tolist())}

    idx = [[] for _ in range(n + 1)]
    vals = [[] for _ in range(n + 1)]
    with open(root / files["observations"], newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 3
        for row in reader:
            k = int(row[0])
            key = tuple(float(c) for c in row[2:2 + dim])
            if key not in lookup:
                raise DatasetError(f"observation at unknown spatial point {key}")
            idx[k].append(lookup[key])
            vals[k].append(float(row[-1]))
    obs_idx = [np.array(i, int) if i else None for i in idx]
    obs_val = [np.array(v) if v else None for v in vals]

    order = int(manifest["order"])
    truth = np.zeros((n + 1, order * len(X)))
    with open(root / files["truth"], newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            truth[int(row[0]), int(row[1])] = float(row[2])
    sqrt_seconds = 0.0
    timing = root / files.get("timing", "timing.json")
    if timing.exists():
        sqrt_seconds = float(json.loads(timing.read_text()).get("spatial_sqrt_seconds", 0.0))
    return Dataset(manifest["kind"], int(manifest["seed"]), X, times, order, obs_idx, obs_val, truth,
                   np.array(manifest["train_space"], int), np.array(manifest["test_space"], int),
                   t0_observable=bool(manifest["t0_observable"]), sqrt_seconds=sqrt_seconds,
                   meta={"config": manifest.get("config")})


def make_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    """Generate or load the dataset named by the data block."""
    if cfg.data.kind == "onmodel":
        return generate_onmodel(cfg, seed)
    if cfg.data.kind == "synthetic":
        return generate_synthetic(cfg, seed)
    return load_dataset(cfg.data.path)
