import csv
import json
import time

import numpy as np
import pytest

from mbdl import tensor as tc
from mbdl.acceptance import CRITERIA
from mbdl.cli import main

LASSO_SOLVE = {"schema_version": 1, "problem": {"generate": {"N": 1}}, "seed": 3}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, strict=True))
    return rows[0], rows[1:]


def all_csvs_parse(root):
    paths = sorted(root.rglob("*.csv"))
    for p in paths:
        header, rows = read_csv(p)
        assert header and all(h for h in header), p
        assert all(len(r) == len(header) for r in rows), p
    return paths


# -- solve ---------------------------------------------------------------------------

def test_solve_ista_trace_is_finite(tmp_path):
    cfg = write(tmp_path / "lasso.json", LASSO_SOLVE)
    assert main(["solve", "--method", "ista", "--config", cfg, "--out", str(tmp_path / "ista")]) == 0
    header, rows = read_csv(tmp_path / "ista" / "trace.csv")
    assert header == ["iter", "objective", "residual", "wall_ns"]
    vals = np.array([[float(v) for v in r] for r in rows])
    assert len(vals) == 2000 and np.all(np.isfinite(vals))
    assert np.all(np.diff(vals[:, 3]) >= 0)
    assert tc.load_tensor(tmp_path / "ista" / "solution.mbt").shape == (64,)


def test_solve_ista_and_admm_agree(tmp_path):
    cfg = write(tmp_path / "lasso.json", LASSO_SOLVE)
    final = {}
    for m in ("ista", "admm"):
        assert main(["solve", "--method", m, "--config", cfg, "--out", str(tmp_path / m)]) == 0
        final[m] = json.loads((tmp_path / m / "summary.json").read_text())["objective"]
    assert abs(final["admm"] - final["ista"]) / abs(final["ista"]) <= 1e-5


def test_solve_overrides_and_seed(tmp_path):
    cfg = write(tmp_path / "lasso.json", {**LASSO_SOLVE, "method": "fista"})
    assert main(["solve", "--config", cfg, "--set", "params.K=7", "--seed", "4", "--out", str(tmp_path / "o")]) == 0
    s = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert s["iterations"] == 7 and s["method"] == "fista"


def test_solve_kf_on_a_linear_model(tmp_path):
    cfg = write(tmp_path / "kf.json", {"schema_version": 1, "method": "kf", "seed": 1,
                                       "model": {"A": [[0.9]], "C": [[1.0]], "V": [[0.1]], "W": [[0.2]]},
                                       "simulate": {"T": 40, "N": 3}})
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert tc.load_tensor(tmp_path / "o" / "estimates.mbt").shape == (3, 40, 1)
    _, rows = read_csv(tmp_path / "o" / "trace.csv")
    assert len(rows) == 40


def test_empty_config_exits_2(tmp_path, capsys):
    cfg = tmp_path / "empty.json"
    cfg.write_text("")
    assert main(["solve", "--config", str(cfg)]) == 2
    assert "error" in capsys.readouterr().err
    assert main(["solve", "--config", write(tmp_path / "obj.json", {})]) == 2
    assert "schema_version" in capsys.readouterr().err


def test_unknown_method_lists_valid_ones(tmp_path, capsys):
    cfg = write(tmp_path / "lasso.json", {**LASSO_SOLVE, "method": "omp"})
    assert main(["solve", "--config", cfg]) == 2
    assert "'ista'" in capsys.readouterr().err


def test_missing_files_exit_2(tmp_path):
    assert main(["solve", "--config", str(tmp_path / "nope.json")]) == 2
    cfg = write(tmp_path / "f.json", {"schema_version": 1, "method": "ista", "problem": {"file": "gone.json"},
                                      "x": "gone.mbt"})
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert main(["eval", "--run", str(tmp_path / "no-run")]) == 2


def test_unknown_verb_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_1(tmp_path):
    cfg = write(tmp_path / "div.json", {**LASSO_SOLVE, "method": "ista", "params": {"mu": 50.0, "K": 3000}})
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o")]) == 1


def test_bad_thread_cap_exits_2(tmp_path, monkeypatch):
    monkeypatch.setenv("MBDL_THREADS", "zero")
    cfg = write(tmp_path / "b.json", {"schema_version": 1, "task": "lasso", "methods": ["ista", "fista"],
                                      "dataset": {"N": 100}})
    assert main(["bench", "--config", cfg, "--out", str(tmp_path / "b")]) == 2


# -- train / eval / gen-data --------------------------------------------------------

def test_train_then_eval(tmp_path, capsys):
    cfg = write(tmp_path / "t.json", {"schema_version": 1, "task": "lasso", "method": "lista",
                                      "dataset": {"N": 200}, "params": {"K": 3},
                                      "train": {"epochs": 2, "batch_size": 16}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "runs")]) == 0
    (run_dir,) = list((tmp_path / "runs").iterdir())
    metrics = json.loads((run_dir / "metrics.json").read_text())
    assert main(["eval", "--config", cfg, "--out", str(tmp_path / "runs")]) == 0
    assert json.loads((run_dir / "eval.json").read_text())["test_mse"] == metrics["test_mse"]
    assert main(["eval", "--run", str(run_dir)]) == 0
    all_csvs_parse(tmp_path)


@pytest.mark.parametrize("task, expect", [
    ("lasso", {"X", "S", "problem"}),
    ("linear-tracking", {"X", "Z", "S"}),
    ("lqg", {"X", "Z", "S"}),
])
def test_gen_data_writes_files_and_manifest(tmp_path, task, expect):
    cfg = write(tmp_path / "g.json", {"schema_version": 1, "task": task, "dataset": {"N": 20}})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert set(manifest["files"]) == expect and manifest["task"] == task
    for name in manifest["files"].values():
        assert (tmp_path / "d" / name).exists()
    if "X" in manifest["files"]:
        assert tc.load_tensor(tmp_path / "d" / "X.mbt").shape[0] == 20


def test_solve_reads_generated_data(tmp_path):
    gen = write(tmp_path / "g.json", {"schema_version": 1, "task": "lasso", "dataset": {"N": 4}})
    assert main(["gen-data", "--config", gen, "--out", str(tmp_path / "d")]) == 0
    cfg = write(tmp_path / "d" / "s.json", {"schema_version": 1, "method": "fista",
                                            "problem": {"file": "problem.json"}, "x": "X.mbt"})
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert tc.load_tensor(tmp_path / "o" / "solution.mbt").shape == (4, 64)


# -- bench ---------------------------------------------------------------------------

def test_single_method_bench_rejected(tmp_path):
    cfg = write(tmp_path / "b.json", {"schema_version": 1, "task": "lasso", "methods": ["ista"]})
    assert main(["bench", "--config", cfg, "--out", str(tmp_path / "b")]) == 2
    cfg = write(tmp_path / "b2.json", {"schema_version": 1, "task": "lasso", "methods": ["ista", "ista"]})
    assert main(["bench", "--config", cfg, "--out", str(tmp_path / "b")]) == 2


def test_lasso_bench_ista_column_monotone(tmp_path):
    cfg = write(tmp_path / "b.json", {"schema_version": 1, "task": "lasso", "methods": ["ista", "fista", "lista"],
                                      "dataset": {"N": 200}, "train": {"epochs": 2}})
    assert main(["bench", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    header, rows = read_csv(tmp_path / "b" / "bench.csv")
    assert header == ["method", "index", "mse", "objective"]
    assert {r[0] for r in rows} == {"ista", "fista", "lista"}
    obj = [float(r[3]) for r in rows if r[0] == "ista"]
    assert len(obj) == 50
    assert all(b <= a * (1 + 1e-12) for a, b in zip(obj, obj[1:]))
    header, rows = read_csv(tmp_path / "b" / "summary.csv")
    assert header[:3] == ["method", "test_mse", "test_mse_db"] and len(rows) == 3
    assert len(all_csvs_parse(tmp_path)) > 5


def test_bench_is_thread_count_invariant(tmp_path, monkeypatch):
    cfg = write(tmp_path / "b.json", {"schema_version": 1, "task": "lasso", "methods": ["ista", "lista"],
                                      "dataset": {"N": 200}, "train": {"epochs": 1}})
    out = {}
    for n in ("1", "2"):
        monkeypatch.setenv("MBDL_THREADS", n)
        assert main(["bench", "--config", cfg, "--out", str(tmp_path / n)]) == 0
        out[n] = (tmp_path / n / "bench.csv").read_bytes()
    assert out["1"] == out["2"]


def test_lorenz_bench_orders_kalmannet_below_ekf(tmp_path):
    cfg = write(tmp_path / "b.json", {
        "schema_version": 1, "task": "lorenz", "seed": 0, "methods": ["ekf", "kalmannet"],
        "dataset": {"N_train": 16, "N_val": 4},
        "params": {"kalmannet": {}},
        "train": {"lr": 1e-2, "momentum": 0.9, "batch_size": 16, "epochs": 15, "clip": 1.0}})
    assert main(["bench", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    _, rows = read_csv(tmp_path / "b" / "summary.csv")
    db = {r[0]: float(r[2]) for r in rows}
    assert db["kalmannet"] < db["ekf"]


# -- suite ---------------------------------------------------------------------------

def test_suite_list_prints_ids_without_running(tmp_path, capsys):
    t0 = time.perf_counter()
    assert main(["suite", "--list", "--out", str(tmp_path / "s")]) == 0
    assert time.perf_counter() - t0 < 1.0
    ids = [int(line.split()[0]) for line in capsys.readouterr().out.splitlines()]
    assert ids == sorted(CRITERIA)
    assert not (tmp_path / "s").exists()


def test_suite_rejects_unknown_ids(tmp_path):
    assert main(["suite", "--only", "99", "--out", str(tmp_path)]) == 2
    assert main(["suite", "--only", "x", "--out", str(tmp_path)]) == 2


def test_suite_quick_finishes_within_budget(tmp_path):
    t0 = time.perf_counter()
    code = main(["suite", "--quick", "--out", str(tmp_path / "s")])
    assert time.perf_counter() - t0 < 300
    assert code == 0
    res = json.loads((tmp_path / "s" / "results.json").read_text())
    assert res["passed"] and res["quick"]


def test_tampered_soft_threshold_fails_criteria(tmp_path, monkeypatch):
    def off_by_sign(x, beta):
        return np.sign(x) * np.maximum(np.abs(x) + np.asarray(beta), 0.0)

    monkeypatch.setattr(tc, "soft_threshold", off_by_sign)
    code = main(["suite", "--quick", "--only", "1,2,3,4,9", "--out", str(tmp_path / "s")])
    assert code == 1
    res = json.loads((tmp_path / "s" / "results.json").read_text())
    failed = [r["id"] for r in res["results"] if not r["passed"]]
    assert len(failed) >= 3
