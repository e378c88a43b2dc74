"""Run filters and smoothers on datasets and turn their beliefs into result rows."""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ..baselines import enkf_filter, etkf_filter
from ..cakf import Policy, StoppingRule, cakf_filter
from ..caks import caks_smooth
from ..exact import inverse_free_smoother, kalman_filter
from ..models import DiscreteLgssm, structured_sqrts
from .config import STOCHASTIC, ExperimentConfig
from .datasets import Dataset, _atomic_write, build_model, fmt, make_dataset
from .metrics import avg_nld, mse

SPLITS = ("train", "test", "all")
# fixed codes keep ensemble seeds stable if methods are added
METHOD_CODES = {"cakf": 1, "caks": 2, "kf": 3, "rts": 4, "enkf": 5, "etkf_s": 6, "etkf_l": 7}


@dataclass
class ResultRow:
    method: str
    policy: str
    rank: int | None
    max_iterations: int | None
    seed: int
    step: int | str
    split: str
    mse: float
    avg_nld: float
    wall_time_s: float
    peak_factor_columns: int

    @classmethod
    def columns(cls) -> list:
        return [f.name for f in fields(cls)]


@dataclass
class MethodOutput:
    """Per-step marginal means and variances, shape ``(n + 1, D)`` each."""

    means: np.ndarray
    variances: np.ndarray
    wall_time_s: float
    peak_factor_columns: int
    residual_histories: list | None = None
    flags: list | None = None


def ensemble_seed(data_seed: int, method: str, rank: int) -> int:
    """Deterministic RNG seed for an ensemble method derived from the data seed."""
    ss = np.random.SeedSequence([int(data_seed), METHOD_CODES[method], int(rank)])
    return int(ss.generate_state(1, np.uint64)[0])


def make_cakf_policy(cfg: ExperimentConfig) -> Policy:
    s = cfg.solver
    return Policy(s.policy, seed=s.policy_seed) if s.policy == "random_gaussian" else Policy(s.policy)


def _cakf(model, obs, cfg, rank):
    s = cfg.solver
    stopping = StoppingRule(max_iterations=rank, atol=float(s.atol), rtol=float(s.rtol))
    trunc = s.truncation_rank if s.truncation_rank is not None else rank
    return cakf_filter(model, obs, policy=make_cakf_policy(cfg), stopping=stopping,
                       truncation_rank=trunc, no_truncation=bool(s.no_truncation) or rank is None)


def run_method(method: str, model: DiscreteLgssm, ds: Dataset, cfg: ExperimentConfig,
               rank: int | None) -> MethodOutput:
    """Run one method on ``model`` with the dataset's observations."""
    obs = ds.observations
    start = time.perf_counter()
    if method in ("kf", "rts"):
        trace = kalman_filter(model, obs)
        beliefs = trace.filtered if method == "kf" else inverse_free_smoother(trace, model).beliefs
        means = np.stack([b.mean for b in beliefs])
        var = np.stack([b.var for b in beliefs])
        return MethodOutput(means, var, time.perf_counter() - start, model.state_dim)
    if method in ("cakf", "caks"):
        trace = _cakf(model, obs, cfg, rank)
        if method == "cakf":
            means = np.stack(trace.m)
            var = np.stack([trace.variances(k) for k in range(trace.n + 1)])
        else:
            sm = caks_smooth(trace)
            means = np.stack(sm.m)
            var = np.stack([sm.variances(k) for k in range(sm.n + 1)])
        hist = [None if h is None else [float(v) for v in h] for h in trace.residual_history]
        return MethodOutput(means, var, time.perf_counter() - start, trace.peak_factor_columns, hist,
                            [f for fl in trace.flags for f in fl])
    if method in STOCHASTIC:
        seed = ensemble_seed(ds.seed, method, rank)
        if method == "enkf":
            tr = enkf_filter(model, obs, rank, seed, extra_time_s=ds.sqrt_seconds)
        else:
            mode = "sampled" if method == "etkf_s" else "lanczos"
            extra = ds.sqrt_seconds if mode == "sampled" else 0.0
            tr = etkf_filter(model, obs, rank, seed, init_predict_mode=mode, extra_time_s=extra)
        return MethodOutput(np.stack(tr.means), np.stack(tr.variances), tr.wall_time_s, int(rank),
                            flags=tr.flags)
    raise ValueError(f"unknown method {method!r}")


# ensemble spreads can collapse to zero in some coordinates
VARIANCE_FLOOR = 1e-300


def score(out: MethodOutput, ds: Dataset, per_step: bool = False) -> list:
    """``(step, split, mse, avg_nld)`` tuples; steps are averaged into ``"aggregate"``."""
    rows = []
    var = np.maximum(out.variances, VARIANCE_FLOOR)
    for split in SPLITS:
        idx = ds.state_indices(split)
        if len(idx) == 0:
            continue
        errs = [mse(ds.truth[k, idx], out.means[k, idx]) for k in range(ds.n + 1)]
        nlds = [avg_nld(ds.truth[k, idx], out.means[k, idx], var[k, idx]) for k in range(ds.n + 1)]
        if per_step:
            rows.extend((k, split, e, v) for k, (e, v) in enumerate(zip(errs, nlds)))
        rows.append(("aggregate", split, float(np.mean(errs)), float(np.mean(nlds))))
    return rows


def _prepare_model(method: str, cfg: ExperimentConfig, ds: Dataset) -> DiscreteLgssm:
    model = build_model(cfg, ds)
    if method in ("enkf", "etkf_s"):
        model = structured_sqrts(model)
        # reuse the square root timing recorded at generation when available
        if not ds.sqrt_seconds:
            model.gmp.spatial_sqrt()
            ds.sqrt_seconds = model.gmp.sqrt_seconds
    return model


@dataclass
class RunResult:
    rows: list
    trajectories: dict
    residual_histories: dict


def _ranks_for(method: str, cfg: ExperimentConfig) -> list:
    if method in ("kf", "rts"):
        return [None]
    return cfg.solver.rank_list()


def run_seed(cfg: ExperimentConfig, seed: int, methods: list, ds: Dataset | None = None) -> RunResult:
    ds = make_dataset(cfg, seed) if ds is None else ds
    rows, traj, hist = [], {}, {}
    for method in methods:
        model = _prepare_model(method, cfg, ds)
        for rank in _ranks_for(method, cfg):
            out = run_method(method, model, ds, cfg, rank)
            policy = cfg.solver.policy if method in ("cakf", "caks") else ""
            max_it = rank if method in ("cakf", "caks") else None
            for step, split, e, v in score(out, ds, cfg.output.per_step):
                rows.append(ResultRow(method, policy, rank, max_it, ds.seed, step, split, e, v,
                                      out.wall_time_s, out.peak_factor_columns))
            key = (method, rank, ds.seed)
            if cfg.output.trajectories:
                traj[key] = (out.means, np.sqrt(np.maximum(out.variances, 0.0)))
            if out.residual_histories is not None:
                hist[key] = out.residual_histories
    return RunResult(rows, traj, hist)


def run_experiment(cfg: ExperimentConfig, methods: list | None = None, threads: int = 1,
                   datasets: dict | None = None) -> RunResult:
    """All (seed, method, rank) combinations; seeds run in parallel worker slots."""
    if methods is None:
        methods = cfg.solver.methods if cfg.solver.methods is not None else [cfg.solver.method]
    seeds = cfg.data.seed_list() if cfg.data.kind != "file" else [None]
    datasets = datasets or {}

    def one(seed):
        return run_seed(cfg, seed, methods, datasets.get(seed))

    if threads > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(s) for s in seeds]
    merged = RunResult([], {}, {})
    for r in results:
        merged.rows.extend(r.rows)
        merged.trajectories.update(r.trajectories)
        merged.residual_histories.update(r.residual_histories)
    return merged


# --- output ------------------------------------------------------------------


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return fmt(v)
    return str(v)


def rows_to_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ResultRow.columns())
    for r in rows:
        w.writerow([_cell(getattr(r, c)) for c in ResultRow.columns()])
    return buf.getvalue()


def rows_to_json(rows: list) -> str:
    return json.dumps([asdict(r) for r in rows], indent=1) + "\n"


def write_results(result: RunResult, cfg: ExperimentConfig, out_dir, fmt_name: str = "csv",
                  name: str = "results") -> Path:
    out = Path(out_dir)
    text = rows_to_csv(result.rows) if fmt_name == "csv" else rows_to_json(result.rows)
    path = out / f"{name}.{fmt_name}"
    _atomic_write(path, text)
    _atomic_write(out / f"{name}.config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    for (method, rank, seed), (means, stds) in sorted(result.trajectories.items(), key=str):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step_index", "state_index", "mean", "std"])
        for k in range(means.shape[0]):
            for i in range(means.shape[1]):
                w.writerow([k, i, fmt(means[k, i]), fmt(stds[k, i])])
        _atomic_write(out / "trajectories" / f"{method}_r{rank}_s{seed}.csv", buf.getvalue())
    if result.residual_histories:
        hist = {f"{m}_r{r}_s{s}": h for (m, r, s), h in result.residual_histories.items()}
        _atomic_write(out / f"{name}.residuals.json", json.dumps(hist, sort_keys=True) + "\n")
    return path
