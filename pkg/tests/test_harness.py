import json
import math

import numpy as np
import pytest
from scipy.stats import norm

from cakalman.harness import cli
from cakalman.harness.config import ConfigError, config_from_dict, load_config
from cakalman.harness.datasets import (
    build_model,
    generate_onmodel,
    generate_synthetic,
    load_dataset,
    target_function,
    write_dataset,
)
from cakalman.harness.experiment import ResultRow, ensemble_seed, rows_to_csv, run_experiment
from cakalman.harness.metrics import avg_nld, mse
from cakalman.linops import dense


# --- metrics -----------------------------------------------------------------


def test_mse_examples(rng):
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse([1.0, 2.0], [0.0, 0.0]) == 2.5
    a, b = rng.standard_normal(100), rng.standard_normal(100)
    total = 0.0
    for x, y in zip(a, b):
        total += (x - y) * (x - y)
    assert mse(a, b) == pytest.approx(total / 100, rel=1e-13)
    with pytest.raises(ValueError):
        mse([1.0], [1.0, 2.0])


def test_avg_nld_examples(rng):
    assert avg_nld([0.0], [0.0], [1.0]) == pytest.approx(0.5 * math.log(2 * math.pi))
    assert avg_nld([0.0], [0.0], [1 / (2 * math.pi)]) == pytest.approx(0.0, abs=1e-15)
    t, m, v = rng.standard_normal(50), rng.standard_normal(50), rng.uniform(0.1, 2, 50)
    expected = -np.mean([norm.logpdf(ti, mi, math.sqrt(vi)) for ti, mi, vi in zip(t, m, v)])
    assert avg_nld(t, m, v) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError, match="index 1"):
        avg_nld([0.0, 0.0], [0.0, 0.0], [1.0, 0.0])


# --- configuration -------------------------------------------------------------


def test_default_config_hyperparameters():
    cfg = config_from_dict({})
    assert cfg.model.temporal.lengthscale == 0.5 and cfg.model.spatial.lengthscale == 0.5
    assert cfg.model.temporal.output_scale == 1.0 and cfg.model.noise_std == 0.1
    assert cfg.model.temporal.nu == 1.5 and cfg.model.spatial.nu == 1.5


@pytest.mark.parametrize("raw", [
    {"model": {"colour": 1}},
    {"solver": {"method": "ukf"}},
    {"model": {"temporal": {"lengthscale": -1}}},
    {"data": {"kind": "synthetic", "holdout_fraction": 1.5}},
    {"solver": {"methods": ["enkf"], "ranks": [0]}},
    {"solver": {"policy": "random_gaussian"}},
    {"data": {"kind": "file"}},
    {"output": {"format": "xml"}},
    {"model": "oops"},
])
def test_config_rejects(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_load_config_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("solver:\n  ranks: [1, 2]\ndata:\n  seeds: [3, 4]\n")
    cfg = load_config(p)
    assert cfg.solver.rank_list() == [1, 2] and cfg.data.seed_list() == [3, 4]
    p.write_text("solver: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(p)


# --- datasets ----------------------------------------------------------------------


def _small(**data):
    raw = {"data": {"n_space": 10, "n_train_space": 4, "horizon": 2.0, **data}}
    return config_from_dict(raw)


def test_onmodel_determinism_bytes(tmp_path):
    cfg = _small()
    for name in ("a", "b"):
        write_dataset(generate_onmodel(cfg, 5), tmp_path / name, cfg.to_dict())
    for f in ("manifest.json", "observations.csv", "truth.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    other = generate_onmodel(cfg, 6)
    assert not np.array_equal(other.truth, load_dataset(tmp_path / "a").truth)


def test_onmodel_roundtrip_exact(tmp_path):
    cfg = _small()
    ds = generate_onmodel(cfg, 2)
    back = load_dataset(write_dataset(ds, tmp_path))
    np.testing.assert_array_equal(back.truth, ds.truth)
    np.testing.assert_array_equal(back.X, ds.X)
    for a, b in zip(ds.obs_values, back.obs_values):
        assert (a is None and b is None) or np.array_equal(a, b)
    assert json.loads((tmp_path / "timing.json").read_text())["spatial_sqrt_seconds"] >= 0


def test_onmodel_noiseless_targets_equal_truth():
    cfg = config_from_dict({"model": {"noise_std": 0.0}, "data": {"n_space": 10, "n_train_space": 4}})
    ds = generate_onmodel(cfg, 0)
    observed = [k for k, v in enumerate(ds.obs_values) if v is not None]
    assert len(observed) == 10
    for k in observed:
        np.testing.assert_array_equal(ds.obs_values[k], ds.truth[k, ds.obs_indices[k]])


def test_onmodel_default_protocol_shape():
    ds = generate_onmodel(config_from_dict({}), 0)
    assert ds.state_dim == 200 and ds.n == 100
    assert sum(v is not None for v in ds.obs_values) == 10
    assert len(ds.train_space) == 20 and len(ds.test_space) == 80


def test_onmodel_refuses_large_grid():
    cfg = config_from_dict({"model": {"spatial": {"dim": 2}}, "data": {"n_space": 100}})
    with pytest.raises(ConfigError, match="10000"):
        generate_onmodel(cfg, 0)


def test_synthetic_target_and_grids():
    assert target_function(0.0, np.pi / 2) == pytest.approx(1.0)
    assert np.all(target_function(np.linspace(0, 1, 5), 0.0) == 0.0)
    cfg = config_from_dict({"data": {"kind": "synthetic"}, "model": {"spatial": {"nu": 2.5, "lengthscale": 2.0}}})
    ds = generate_synthetic(cfg)
    observed = [k for k, v in enumerate(ds.obs_values) if v is not None]
    assert len(observed) == 11 and all(len(ds.obs_values[k]) == 16 for k in observed)
    assert ds.n_space == 16 + 158 - 2
    assert ds.n == 51  # 51 grid times plus the duplicated initial time
    model = build_model(cfg, ds)
    assert model.state_dim == 344 and model.n == ds.n
    # truth carries the time derivative as second component
    np.testing.assert_allclose(ds.truth[:, ds.n_space:], -ds.truth[:, :ds.n_space])


def test_synthetic_holdout_subgrid():
    cfg = config_from_dict({"data": {"kind": "synthetic", "holdout_fraction": 0.25}})
    ds = generate_synthetic(cfg)
    assert len(ds.train_space) == 12


def test_state_indices_cover_all(rng):
    ds = generate_onmodel(_small(), 0)
    tr, te = ds.state_indices("train"), ds.state_indices("test")
    assert sorted(np.concatenate([tr, te]).tolist()) == list(range(ds.state_dim))


# --- experiment --------------------------------------------------------------------


def test_lossless_cakf_rows_equal_kf():
    cfg = config_from_dict({"data": {"n_space": 10, "n_train_space": 4},
                            "solver": {"methods": ["kf", "cakf"], "rank": None, "policy": "coordinate"}})
    rows = run_experiment(cfg).rows
    kf = {r.split: r for r in rows if r.method == "kf"}
    ca = {r.split: r for r in rows if r.method == "cakf"}
    assert set(kf) == {"train", "test", "all"}
    for split in kf:
        assert ca[split].mse == pytest.approx(kf[split].mse, rel=1e-8)
        assert ca[split].avg_nld == pytest.approx(kf[split].avg_nld, rel=1e-8)


def test_rank_sweep_schema():
    cfg = config_from_dict({"data": {"n_space": 10, "n_train_space": 4, "seeds": [0, 1]},
                            "solver": {"methods": ["cakf", "enkf"], "ranks": [2, 4]}})
    rows = run_experiment(cfg).rows
    keys = {(r.method, r.rank, r.seed, r.split) for r in rows}
    assert len(keys) == len(rows) == 2 * 2 * 2 * 3
    assert all(r.step == "aggregate" and r.mse >= 0 and np.isfinite(r.avg_nld) for r in rows)


def test_rows_bitwise_reproducible_and_threads():
    cfg = config_from_dict({"data": {"n_space": 10, "n_train_space": 4, "seeds": [0, 1, 2]},
                            "solver": {"methods": ["cakf", "etkf_s"], "ranks": [3]}})
    a = rows_to_csv([_strip_time(r) for r in run_experiment(cfg).rows])
    b = rows_to_csv([_strip_time(r) for r in run_experiment(cfg, threads=3).rows])
    assert a == b


def _strip_time(r: ResultRow) -> ResultRow:
    r.wall_time_s = 0.0
    return r


def test_ensemble_seed_depends_on_inputs():
    assert ensemble_seed(0, "enkf", 4) == ensemble_seed(0, "enkf", 4)
    assert len({ensemble_seed(0, "enkf", 4), ensemble_seed(1, "enkf", 4), ensemble_seed(0, "etkf_s", 4)}) == 3


def test_exact_posterior_beats_prior_nld():
    cfg = config_from_dict({"data": {"n_space": 20, "n_train_space": 8, "seeds": [0, 1, 2, 3, 4]},
                            "solver": {"methods": ["kf"]}})
    post, prior = [], []
    for r in run_experiment(cfg).rows:
        if r.split != "all":
            continue
        post.append(r.avg_nld)
        ds = generate_onmodel(cfg, r.seed)
        model = build_model(cfg, ds)
        prior.append(np.mean([avg_nld(ds.truth[k], model.mu[k], np.diag(dense(model.Sigma[k])))
                              for k in range(ds.n + 1)]))
    assert np.median(post) <= np.median(prior)


def test_per_step_rows():
    cfg = config_from_dict({"data": {"n_space": 10, "n_train_space": 4, "horizon": 1.0},
                            "solver": {"method": "caks", "rank": 2}, "output": {"per_step": True}})
    rows = run_experiment(cfg).rows
    assert sum(r.step == "aggregate" for r in rows) == 3
    assert sum(isinstance(r.step, int) for r in rows) == 3 * 21


# --- CLI ---------------------------------------------------------------------------


def _write(tmp_path, text):
    p = tmp_path / "cfg.yaml"
    p.write_text(text)
    return str(p)


SMALL = "data:\n  n_space: 10\n  n_train_space: 4\n  horizon: 1.0\nsolver:\n  ranks: [2]\n"


def test_cli_generate_and_filter(tmp_path):
    cfg = _write(tmp_path, SMALL)
    assert cli.main(["generate-onmodel", "--config", cfg, "--out", str(tmp_path / "ds"), "--seed", "3"]) == 0
    assert (tmp_path / "ds" / "manifest.json").exists()
    file_cfg = _write(tmp_path, f"data:\n  kind: file\n  path: {tmp_path / 'ds'}\nsolver:\n  ranks: [2]\n")
    assert cli.main(["filter", "--config", file_cfg, "--out", str(tmp_path / "res")]) == 0
    text = (tmp_path / "res" / "filter.csv").read_text().splitlines()
    assert text[0] == ",".join(ResultRow.columns())
    assert len(text) == 4
    assert json.loads((tmp_path / "res" / "filter.config.json").read_text())["solver"]["ranks"] == [2]


def test_cli_subcommands(tmp_path):
    cfg = _write(tmp_path, SMALL + "  n_samples: 2\n")
    out = str(tmp_path / "o")
    assert cli.main(["benchmark", "--config", cfg, "--out", out, "--format", "json"]) == 0
    rows = json.loads((tmp_path / "o" / "benchmark.json").read_text())
    assert {r["method"] for r in rows} == {"kf", "rts", "cakf", "caks"}
    assert cli.main(["compare-baselines", "--config", cfg, "--out", out, "--threads", "2"]) == 0
    assert cli.main(["sample", "--config", cfg, "--out", out]) == 0
    assert (tmp_path / "o" / "samples_s0.csv").read_text().count("\n") == 1 + 21 * 20 * 2
    assert cli.main(["smooth", "--config", cfg, "--out", out]) == 2  # cakf is not a smoother
    smooth_cfg = _write(tmp_path, SMALL + "  method: caks\n")
    assert cli.main(["smooth", "--config", smooth_cfg, "--out", out]) == 0


def test_cli_synthetic(tmp_path):
    assert cli.main(["generate-synthetic", "--out", str(tmp_path / "syn")]) == 0
    assert load_dataset(tmp_path / "syn").state_dim == 344


@pytest.mark.parametrize("text", ["solver:\n  rank_typo: 3\n", "model:\n  noise_std: -1\n", "solver: [x\n"])
def test_cli_config_errors_exit_2(tmp_path, text, capsys):
    assert cli.main(["filter", "--config", _write(tmp_path, text)]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_cli_numerical_failure_exit_3(tmp_path, capsys):
    text = ("model:\n  noise_std: 0.0\n  temporal:\n    output_scale: 0.0\n"
            "data:\n  n_space: 10\n  n_train_space: 4\nsolver:\n  method: kf\n")
    assert cli.main(["filter", "--config", _write(tmp_path, text), "--out", str(tmp_path)]) == 3
    assert "numerical failure" in capsys.readouterr().err
