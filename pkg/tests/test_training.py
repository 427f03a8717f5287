import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbdl import statespace as ss
from mbdl.sparse import NumericalError
from mbdl.training import (Dataset, TrainConfig, empirical_risk, fit, gen_sparse_dataset, gen_trajectory_dataset,
                           make_rng, mse_db, sgd_step)


def toy_dataset(N=10, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, 3))
    S = rng.standard_normal((N, 2))
    idx = rng.permutation(N)
    return Dataset(X, S, np.sort(idx[:6]), np.sort(idx[6:8]), np.sort(idx[8:]))


# -- empirical risk ---------------------------------------------------------------

def test_perfect_predictor_has_zero_risk():
    ds = toy_dataset()
    lookup = {tuple(x): s for x, s in zip(ds.inputs, ds.targets)}
    rule = lambda X: np.stack([lookup[tuple(x)] for x in X])  # noqa: E731
    assert empirical_risk(rule, ds, "train") == 0.0


def test_constant_wrong_classifier_zero_one():
    labels = np.array([0, 1, 1, 0, 1, 0, 0, 1, 1, 0])[:, None].astype(float)
    ds = Dataset(np.zeros((10, 1)), labels, np.arange(10), np.array([], int), np.array([], int))
    assert empirical_risk(lambda X: np.full((len(X), 1), 7.0), ds, "train", "zero-one") == 1.0


def test_risk_matches_hand_loop():
    ds = toy_dataset()
    W = np.array([[0.5, -1.0, 2.0], [1.5, 0.0, -0.3]])
    rule = lambda X: X @ W.T  # noqa: E731
    idx = np.arange(10)
    total = 0.0
    for i in idx:
        pred = [sum(W[r, c] * ds.inputs[i, c] for c in range(3)) for r in range(2)]
        total += sum((pred[r] - ds.targets[i, r]) ** 2 for r in range(2))
    assert abs(empirical_risk(rule, ds, idx) - total / 10) <= 1e-12


def test_risk_decomposes_over_splits():
    ds = toy_dataset(N=40, seed=1)
    rule = lambda X: X[:, :2] * 0.3  # noqa: E731
    parts = [(len(ds.split(n)), empirical_risk(rule, ds, n)) for n in ("train", "val", "test")]
    whole = empirical_risk(rule, ds, np.arange(40))
    assert whole == pytest.approx(sum(n * r for n, r in parts) / 40, rel=1e-13)


def test_risk_errors():
    ds = Dataset(np.zeros((3, 1)), np.zeros((3, 1)), np.arange(3), np.array([], int), np.array([], int))
    with pytest.raises(ValueError):
        empirical_risk(lambda X: X, ds, "test")
    with pytest.raises(ValueError):
        empirical_risk(lambda X: X, ds, "train", loss="hinge")
    with pytest.raises(ValueError):
        ds.split("holdout")


def test_dataset_rejects_overlapping_splits():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 1)), np.zeros((3, 1)), np.array([0, 1]), np.array([1]), np.array([2]))
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 1)), np.zeros((2, 1)), np.array([0, 1]), np.array([], int), np.array([2]))


# -- sgd ---------------------------------------------------------------------------

def test_zero_step_size_is_identity():
    params = {"a": np.array([1.0, -2.0]), "b": np.array(3.0)}
    out = sgd_step(params, {"a": np.ones(2), "b": np.array(5.0)}, TrainConfig(lr=0.0), 0)
    for k in params:
        np.testing.assert_array_equal(out[k], params[k])


def test_quadratic_bowl_recursion():
    cfg = TrainConfig(lr=0.1)
    theta = {"t": np.array(1.0)}
    for j in range(1, 31):
        theta = sgd_step(theta, {"t": 2 * theta["t"]}, cfg, j)
        assert float(theta["t"]) == pytest.approx(0.8 ** j, rel=1e-13)


def test_momentum_matches_scripted_recursion():
    cfg = TrainConfig(lr=0.05, momentum=0.7)
    rng = np.random.default_rng(0)
    A = rng.standard_normal((4, 4))
    A = A @ A.T + np.eye(4)
    theta = {"w": rng.standard_normal(4)}
    w_ref, v_ref = theta["w"].copy(), np.zeros(4)
    vel = {}
    for j in range(20):
        theta = sgd_step(theta, {"w": A @ theta["w"]}, cfg, j, vel)
        v_ref = 0.7 * v_ref + A @ w_ref
        w_ref = w_ref - 0.05 * v_ref
        np.testing.assert_allclose(theta["w"], w_ref, rtol=0, atol=1e-12)


def test_step_decay_schedule():
    cfg = TrainConfig(lr=1.0, schedule="step", decay=0.5, decay_every=3)
    assert [cfg.learning_rate(j) for j in range(7)] == [1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.25]


def test_gradient_clipping_caps_norm():
    cfg = TrainConfig(lr=1.0, clip=1.0)
    out = sgd_step({"a": np.zeros(2)}, {"a": np.array([3.0, 4.0])}, cfg, 0)
    np.testing.assert_allclose(out["a"], [-0.6, -0.8], atol=1e-15)


def test_sgd_rejects_bad_gradients():
    with pytest.raises(NumericalError):
        sgd_step({"a": np.zeros(2)}, {"a": np.array([np.nan, 1.0])}, TrainConfig(), 0)
    with pytest.raises(KeyError):
        sgd_step({"a": np.zeros(2)}, {"b": np.zeros(2)}, TrainConfig(), 0)
    with pytest.raises(ValueError):
        sgd_step({"a": np.zeros(2)}, {"a": np.zeros(2)}, TrainConfig(momentum=0.5), 0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(schedule="cosine")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 0.1})


def test_fit_returns_last_finite_iterate_on_nan():
    calls = []

    def objective(prm, idx):
        calls.append(1)
        loss = float(np.sum(prm["w"] ** 2)) if len(calls) < 3 else float("nan")
        return loss, {"w": 2 * prm["w"]}

    res = fit({"w": np.ones(2)}, objective, np.arange(8), TrainConfig(lr=0.1, batch_size=4, epochs=3))
    assert res.diverged
    np.testing.assert_allclose(res.params["w"], 0.8 ** 2 * np.ones(2), rtol=1e-14)


def test_fit_rejects_oversized_batch():
    with pytest.raises(ValueError):
        fit({"w": np.ones(1)}, lambda p, i: (0.0, {"w": 0 * p["w"]}), np.arange(4), TrainConfig(batch_size=5))


def test_fit_selects_best_validation_checkpoint():
    # Overshooting steps make the iterate oscillate with growing amplitude,
    # so the initial parameters validate best.
    res = fit({"w": np.ones(1)}, lambda p, i: (float(np.sum(p["w"] ** 2)), {"w": 2 * p["w"]}), np.arange(4),
              TrainConfig(lr=1.5, batch_size=4, epochs=3), validate=lambda p: float(np.sum(p["w"] ** 2)))
    assert res.best_epoch == 0
    np.testing.assert_array_equal(res.params["w"], 1.0)


# -- synthetic data ------------------------------------------------------------------

def test_zero_signal_zero_noise():
    ds = gen_sparse_dataset(8, 12, 0, 0.0, 20, seed=1)
    assert np.all(ds.inputs == 0) and np.all(ds.targets == 0)


def test_noiseless_measurements_are_exact():
    ds = gen_sparse_dataset(8, 12, 3, 0.0, 20, seed=2)
    np.testing.assert_array_equal(ds.inputs, ds.targets @ ds.extras["H"].T)
    assert np.all(np.count_nonzero(ds.targets, axis=1) == 3)
    np.testing.assert_allclose(np.linalg.norm(ds.extras["H"], axis=0), 1.0, rtol=1e-14)


def test_noise_variance():
    sigma = 0.3
    ds = gen_sparse_dataset(8, 12, 3, sigma, 10_000, seed=3)
    resid = ds.inputs - ds.targets @ ds.extras["H"].T
    assert abs(resid.var() / sigma ** 2 - 1) <= 0.05


def test_sparse_generator_validation():
    with pytest.raises(ValueError):
        gen_sparse_dataset(4, 5, 6, 0.1, 3, seed=0)
    with pytest.raises(ValueError):
        gen_sparse_dataset(4, 5, 2, 0.1, 10, seed=0, splits=(0.5, 0.5, 0.5))


def test_fixed_operator_is_kept():
    H = np.arange(12.0).reshape(3, 4) + 1
    ds = gen_sparse_dataset(3, 4, 1, 0.0, 5, seed=0, H=H)
    np.testing.assert_array_equal(ds.extras["H"], H)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2**31))
def test_default_splits_partition_indices(N, seed):
    ds = gen_sparse_dataset(2, 3, 1, 0.1, N, seed)
    allidx = np.concatenate([ds.train, ds.val, ds.test])
    assert sorted(allidx.tolist()) == list(range(N))
    assert abs(len(ds.train) - 0.7 * N) <= 1


def test_generators_are_deterministic():
    a, b = gen_sparse_dataset(6, 9, 2, 0.1, 30, seed=5), gen_sparse_dataset(6, 9, 2, 0.1, 30, seed=5)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.train, b.train)
    c = gen_sparse_dataset(6, 9, 2, 0.1, 30, seed=6)
    assert not np.array_equal(a.inputs, c.inputs)


def test_rng_streams_are_reproducible_and_distinct():
    assert make_rng(3, 1, 2).random() == make_rng(3, 1, 2).random()
    assert make_rng(3, 1, 2).random() != make_rng(3, 2, 1).random()


def test_trajectory_dataset_inherits_simulation():
    m = ss.StateSpaceModel(A=[[1.0]], C=[[1.0]], z0=[1.0], W=[[0.0]], allow_singular_W=True)
    ds = gen_trajectory_dataset(m, 7, 5, seed=0)
    assert ds.inputs.shape == (5, 7, 1)
    assert np.all(ds.targets == 1.0) and np.all(ds.inputs == 1.0)
    m2 = ss.StateSpaceModel(A=[[0.5]], C=[[1.0]], V=[[0.2]], W=[[0.4]])
    d1, d2 = gen_trajectory_dataset(m2, 7, 5, seed=4), gen_trajectory_dataset(m2, 7, 5, seed=4)
    np.testing.assert_array_equal(d1.inputs, d2.inputs)


def test_mse_db():
    assert mse_db(1.0) == 0.0
    assert mse_db(0.01) == pytest.approx(-20.0, abs=1e-12)
    assert mse_db(2.0) == pytest.approx(10 * math.log10(2.0), abs=1e-15)
