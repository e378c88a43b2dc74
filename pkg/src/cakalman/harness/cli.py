"""Command-line entry point.

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from ..caks import posterior_sample
from ..linops import NumericalError
from .config import ConfigError, ExperimentConfig, load_config, validate
from .datasets import _atomic_write, build_model, fmt, make_dataset, write_dataset
from .experiment import _cakf, run_experiment, write_results

log = logging.getLogger("cakalman")

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

FILTERS = ("cakf", "kf", "enkf", "etkf_s", "etkf_l")
SMOOTHERS = ("caks", "rts")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment configuration")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--seed", type=int, help="single data seed (overrides data.seed/seeds)")
    common.add_argument("--threads", type=int, default=1, help="parallel worker slots over seeds")
    common.add_argument("--format", choices=("csv", "json"), help="result table format")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cakalman", description="Computation-aware Kalman filtering toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate-onmodel", parents=[common], help="sample an on-model dataset from the prior")
    sub.add_parser("generate-synthetic", parents=[common], help="noisy samples of sin(x)exp(-t) on a grid")
    sub.add_parser("filter", parents=[common], help="run a filter (cakf, kf, enkf, etkf_s, etkf_l)")
    sub.add_parser("smooth", parents=[common], help="run a smoother (caks, rts)")
    sub.add_parser("sample", parents=[common], help="posterior trajectory draws from the computation-aware smoother")
    sub.add_parser("benchmark", parents=[common], help="rank sweep of CAKF/CAKS against KF/RTS")
    sub.add_parser("compare-baselines", parents=[common], help="CAKF against EnKF, ETKF-S and ETKF-L")
    return p


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg.data.seed, cfg.data.seeds = int(args.seed), None
    if args.out:
        cfg.output.dir = args.out
    if args.format:
        cfg.output.format = args.format
    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    return validate(cfg)


def _methods(cfg: ExperimentConfig) -> list:
    return cfg.solver.methods if cfg.solver.methods is not None else [cfg.solver.method]


def _generate(cfg: ExperimentConfig, kind: str) -> int:
    cfg.data.kind = kind
    validate(cfg)
    seeds = cfg.data.seed_list()
    for seed in seeds:
        ds = make_dataset(cfg, seed)
        out = Path(cfg.output.dir)
        if len(seeds) > 1:
            out = out / f"seed_{seed}"
        write_dataset(ds, out, cfg.to_dict())
        log.info("wrote %s dataset (D=%d, n=%d) to %s", kind, ds.state_dim, ds.n, out)
    return 0


def _run(cfg: ExperimentConfig, methods: list, threads: int, name: str) -> int:
    result = run_experiment(cfg, methods=methods, threads=threads)
    path = write_results(result, cfg, cfg.output.dir, cfg.output.format, name)
    log.info("wrote %d rows to %s", len(result.rows), path)
    return 0


def _sample(cfg: ExperimentConfig) -> int:
    size = int(cfg.solver.n_samples)
    if size < 1:
        raise ConfigError("solver.n_samples must be at least 1")
    seeds = cfg.data.seed_list() if cfg.data.kind != "file" else [None]
    for seed in seeds:
        ds = make_dataset(cfg, seed)
        model = build_model(cfg, ds)
        trace = _cakf(model, ds.observations, cfg, cfg.solver.rank_list()[0])
        # sampler stream is separate from the data stream of the same seed
        draws = posterior_sample(trace, rng_seed=[int(ds.seed), 1], size=size)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step_index", "state_index", "sample_index", "value"])
        for k in range(draws.shape[0]):
            for i in range(draws.shape[1]):
                w.writerows([k, i, s, fmt(draws[k, i, s])] for s in range(size))
        _atomic_write(Path(cfg.output.dir) / f"samples_s{ds.seed}.csv", buf.getvalue())
    return 0


def dispatch(args) -> int:
    cfg = _load(args)
    cmd = args.command
    if cmd == "generate-onmodel":
        return _generate(cfg, "onmodel")
    if cmd == "generate-synthetic":
        return _generate(cfg, "synthetic")
    if cmd in ("filter", "smooth"):
        allowed = FILTERS if cmd == "filter" else SMOOTHERS
        methods = _methods(cfg)
        bad = [m for m in methods if m not in allowed]
        if bad:
            raise ConfigError(f"'{cmd}' cannot run {', '.join(bad)}; choose from {', '.join(allowed)}")
        return _run(cfg, methods, args.threads, cmd)
    if cmd == "sample":
        return _sample(cfg)
    if cmd == "benchmark":
        return _run(cfg, ["kf", "rts", "cakf", "caks"], args.threads, "benchmark")
    if cmd == "compare-baselines":
        cfg.solver.methods = ["cakf", "enkf", "etkf_s", "etkf_l"]
        validate(cfg)
        return _run(cfg, cfg.solver.methods, args.threads, "compare_baselines")
    raise ConfigError(f"unknown command {cmd}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
