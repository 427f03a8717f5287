import csv
import json

import numpy as np
import pytest

from mbdl import sparse as sp
from mbdl.experiment import (ConfigError, apply_overrides, config_hash, evaluate_run, lasso_data, load_config,
                             metrics_fingerprint, resolve_config, run_experiment)

SMALL_LASSO = {"N": 200}


def cfg(task, method, seed=0, **sections):
    return {"schema_version": 1, "task": task, "method": method, "seed": seed, **sections}


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# -- config handling ---------------------------------------------------------------

def test_unknown_names_list_valid_options():
    with pytest.raises(ConfigError, match="valid methods: .*'fista'.*'ista'"):
        resolve_config(cfg("lasso", "omp"))
    with pytest.raises(ConfigError, match="valid tasks: .*'lasso'"):
        resolve_config(cfg("images", "ista"))
    with pytest.raises(ConfigError, match="valid: "):
        resolve_config(cfg("lasso", "ista", dataset={"size": 3}))


@pytest.mark.parametrize("bad", [{}, {"task": "lasso", "method": "ista"},
                                 {"schema_version": 2, "task": "lasso", "method": "ista"},
                                 {"schema_version": 1, "task": "lasso", "method": "ista", "extra": 1},
                                 {"schema_version": 1, "task": "lasso", "method": "lista", "train": {"momentum": 2}}])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        resolve_config(bad)


def test_defaults_are_filled():
    out = resolve_config(cfg("lasso", "lista", params={"K": 4}))
    assert out["params"]["K"] == 4 and out["params"]["tie_layers"] is False
    assert out["dataset"]["m"] == 32 and out["train"] == {}


def test_overrides_parse_json_and_dotted_keys():
    out = apply_overrides(cfg("lasso", "ista"), ["params.K=7", "dataset.splits=[0.6,0.2,0.2]", "name=run a"])
    assert out["params"]["K"] == 7
    assert out["dataset"]["splits"] == [0.6, 0.2, 0.2]
    assert out["name"] == "run a"
    with pytest.raises(ConfigError):
        apply_overrides({}, ["noequals"])


def test_load_config_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "empty.json").write_text("  \n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "empty.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    (tmp_path / "ok.json").write_text(json.dumps(cfg("lasso", "ista")))
    assert load_config(tmp_path / "ok.json", ["params.K=3"], seed=9)["seed"] == 9


def test_hash_ignores_default_spelling():
    assert config_hash(cfg("lasso", "ista")) == config_hash(cfg("lasso", "ista", params={"K": 50}))
    assert config_hash(cfg("lasso", "ista")) != config_hash(cfg("lasso", "ista", seed=1))


# -- runs -----------------------------------------------------------------------------------

def test_run_directory_layout(tmp_path):
    c = cfg("lasso", "lista", dataset=SMALL_LASSO, params={"K": 3}, train={"epochs": 2, "batch_size": 16})
    rep = run_experiment(c, tmp_path)
    assert rep.run_dir.name == config_hash(c)
    names = {p.name for p in rep.run_dir.iterdir()}
    assert {"config.json", "metrics.json", "loss_trace.csv", "val_trace.csv", "curve.csv", "params"} <= names
    m = json.loads((rep.run_dir / "metrics.json").read_text())
    assert set(m["timing"]) == {"runtime_s", "finished_unix"}
    assert m["test_mse_db"] == pytest.approx(10 * np.log10(m["test_mse"]), abs=1e-12)
    header, rows = read_csv(rep.run_dir / "curve.csv")
    assert header == ["index", "mse", "objective"] and len(rows) == 3
    header, rows = read_csv(rep.run_dir / "val_trace.csv")
    assert header == ["epoch", "val_loss"] and len(rows) == 3


def test_zero_epochs_evaluates_initial_rule(tmp_path):
    lista = run_experiment(cfg("lasso", "lista", dataset=SMALL_LASSO, params={"K": 10}, train={"epochs": 0}),
                           tmp_path).metrics
    ista = run_experiment(cfg("lasso", "ista", dataset=SMALL_LASSO, params={"K": 10}), tmp_path).metrics
    assert lista["epochs"] == 0
    assert lista["test_mse"] == pytest.approx(ista["test_mse"], rel=1e-12)
    assert lista["val_loss_best"] == lista["val_loss_initial"]


def test_ista_run_matches_direct_solver(tmp_path):
    rep = run_experiment(cfg("lasso", "ista", dataset=SMALL_LASSO, params={"K": 20}), tmp_path)
    d = resolve_config(cfg("lasso", "ista", dataset=SMALL_LASSO))["dataset"]
    ds, p = lasso_data(d, 0)
    X, S = ds.take(ds.test)
    expect = float(np.mean(np.sum((sp.ista(p, X, K=20) - S) ** 2, axis=1)))
    assert rep.metrics["test_mse"] == pytest.approx(expect, rel=1e-12)
    _, rows = read_csv(rep.run_dir / "curve.csv")
    objective = [float(r[2]) for r in rows]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(objective, objective[1:]))


@pytest.mark.parametrize("config", [
    cfg("lasso", "lista", dataset=SMALL_LASSO, params={"K": 4}, train={"epochs": 2, "batch_size": 16}),
    cfg("linear-tracking", "kalmannet", dataset={"N": 40, "T": 30},
        train={"epochs": 1, "batch_size": 8, "lr": 1e-2}),
    cfg("lqg", "mpc", dataset={"N": 5, "T": 20}),
])
def test_reruns_are_identical(tmp_path, config):
    a = run_experiment(config, tmp_path / "a")
    b = run_experiment(config, tmp_path / "b")
    assert metrics_fingerprint(a.run_dir / "metrics.json") == metrics_fingerprint(b.run_dir / "metrics.json")
    for name in ("loss_trace.csv", "curve.csv"):
        if (a.run_dir / name).exists():
            assert (a.run_dir / name).read_bytes() == (b.run_dir / name).read_bytes()


@pytest.mark.parametrize("config", [
    cfg("lasso", "lista", dataset=SMALL_LASSO, params={"K": 4}, train={"epochs": 2, "batch_size": 16}),
    cfg("linear-tracking", "fit-covariances", dataset={"N": 40, "T": 30}, train={"epochs": 1, "batch_size": 8}),
    cfg("linear-tracking", "kf", dataset={"N": 40, "T": 30}),
])
def test_evaluate_run_reproduces_metrics(tmp_path, config):
    rep = run_experiment(config, tmp_path)
    ev = evaluate_run(rep.run_dir)
    assert ev.metrics["test_mse"] == rep.metrics["test_mse"]
    assert (rep.run_dir / "eval.json").exists()
    assert (rep.run_dir / "eval_curve.csv").read_bytes() == (rep.run_dir / "curve.csv").read_bytes()


def test_evaluate_run_needs_a_run_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        evaluate_run(tmp_path)


def test_filter_curve_columns(tmp_path):
    rep = run_experiment(cfg("linear-tracking", "kf", dataset={"N": 40, "T": 30}), tmp_path)
    header, rows = read_csv(rep.run_dir / "curve.csv")
    assert header == ["index", "mse"] and len(rows) == 30
    assert np.mean([float(r[1]) for r in rows]) == pytest.approx(rep.metrics["test_mse"], rel=1e-12)


def test_lqg_task_orders_policies(tmp_path):
    small = {"N": 20, "T": 40}
    costs = {m: run_experiment(cfg("lqg", m, dataset=small), tmp_path).metrics["mean_cost"]
             for m in ("lqg", "mpc", "zero")}
    assert costs["lqg"] < costs["zero"]
    assert costs["mpc"] < costs["zero"]


def test_lorenz_ekf_small(tmp_path):
    d = {"T_train": 20, "N_train": 2, "N_val": 1, "T_test": 200, "N_test": 2}
    m = run_experiment(cfg("lorenz", "ekf", dataset=d), tmp_path).metrics
    assert np.isfinite(m["test_mse"]) and m["test_mse"] < 1.0
