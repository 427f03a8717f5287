import logging

import numpy as np
import pytest

from mbdl import hybrid as hy
from mbdl import sparse as sp
from mbdl import tensor as tc
from mbdl.experiment import run_experiment
from mbdl.training import TrainConfig, gen_sparse_dataset


@pytest.fixture(scope="module")
def sparse_data():
    ds = gen_sparse_dataset(32, 64, 5, 0.05, 3000, seed=0)
    return ds, sp.SparseProblem(ds.extras["H"], rho=0.1)


@pytest.fixture(scope="module")
def denoiser(sparse_data):
    ds, _ = sparse_data
    clean = ds.targets[ds.train]
    return hy.train_denoiser(clean, TrainConfig(lr=1e-2, momentum=0.9, batch_size=32, epochs=20))


# -- plug-and-play ADMM ---------------------------------------------------------------

@pytest.mark.parametrize("lam, mu", [(1.0, 1.0), (0.5, 1.5), (3.0, 0.2)])
def test_pnp_with_shrinkage_is_l1_admm(sparse_data, lam, mu):
    ds, p = sparse_data
    hyper = sp.AdmmHyper(lam, mu, max_iter=300)
    for x in ds.inputs[:5]:
        np.testing.assert_allclose(hy.pnp_admm(p, x, hyper), sp.admm(p, x, hyper), rtol=0, atol=1e-12)


def test_pnp_with_shrinkage_under_a_dictionary():
    rng = np.random.default_rng(3)
    Psi, _ = np.linalg.qr(rng.standard_normal((10, 10)))
    p = sp.SparseProblem(rng.standard_normal((6, 10)), Psi=Psi, rho=0.2)
    x = rng.standard_normal(6)
    np.testing.assert_allclose(hy.pnp_admm(p, x), sp.admm(p, x), rtol=0, atol=1e-12)


def test_pnp_zero_input(sparse_data):
    _, p = sparse_data
    np.testing.assert_array_equal(hy.pnp_admm(p, np.zeros(32)), np.zeros(64))


def test_pnp_reports_non_convergence(sparse_data, caplog):
    ds, p = sparse_data
    with caplog.at_level(logging.WARNING, logger="mbdl.hybrid"):
        _, info = hy.pnp_admm(p, ds.inputs[0], sp.AdmmHyper(max_iter=3), return_info=True)
    assert not info["converged"] and info["iterations"] == 3
    assert np.isfinite(info["residual"]) and info["residual"] > 0
    assert "residual" in caplog.text


def test_pnp_never_updates_denoiser_weights(sparse_data, denoiser):
    ds, p = sparse_data
    den, _ = denoiser
    before = {k: v.copy() for k, v in den.params.items()}
    hy.pnp_admm(p, ds.inputs[0], denoiser=den, alpha=0.05)
    for k in before:
        np.testing.assert_array_equal(den.params[k], before[k])


def test_alpha_schedules():
    const = hy.alpha_schedule(0.2)
    decay = hy.alpha_schedule(0.2, "decay")
    assert const(1) == const(50) == 0.2
    assert decay(3) == pytest.approx(0.2 * 0.97 ** 3, rel=1e-15)
    with pytest.raises(ValueError):
        hy.alpha_schedule(0.2, "cosine")


def test_decaying_schedule_changes_shrinkage_result(sparse_data):
    ds, p = sparse_data
    x = ds.inputs[1]
    a = hy.pnp_admm(p, x, sp.AdmmHyper(max_iter=50))
    b = hy.pnp_admm(p, x, sp.AdmmHyper(max_iter=50), schedule="decay")
    assert not np.allclose(a, b)


@pytest.fixture(scope="module")
def pnp_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("pnp")
    base = {"schema_version": 1, "task": "lasso", "seed": 0, "dataset": {"N": 800}}
    admm = run_experiment({**base, "method": "admm", "params": {"lam": 0.5, "max_iter": 300, "tol": 1e-6}},
                          out / "admm").metrics
    pnp = run_experiment({**base, "method": "pnp-admm",
                          "train": {"lr": 1e-2, "momentum": 0.9, "batch_size": 32, "epochs": 20}},
                         out / "pnp").metrics
    return admm, pnp


def test_learned_pnp_not_worse_than_l1_admm(pnp_runs):
    admm, pnp = pnp_runs
    assert pnp["test_mse"] <= admm["test_mse"]


# -- denoiser -----------------------------------------------------------------------------

def test_learned_denoiser_beats_shrinkage_psnr(sparse_data, denoiser):
    ds, _ = sparse_data
    den, _ = denoiser
    clean = ds.targets[ds.test]
    alpha = 0.05
    noisy = clean + alpha * np.random.default_rng(5).standard_normal(clean.shape)
    shrink = hy.shrinkage_denoiser()(noisy, alpha)
    assert hy.psnr(clean, den(noisy, alpha)) > hy.psnr(clean, shrink)


def test_denoiser_near_identity_without_noise(sparse_data, denoiser):
    ds, _ = sparse_data
    den, _ = denoiser
    clean = ds.targets[ds.test]
    assert np.max(np.linalg.norm(den(clean, 0.0) - clean, axis=1)) <= 0.05


def test_denoiser_loss_drops_over_first_epochs(denoiser):
    _, res = denoiser
    assert len(res.epoch_loss) >= 10
    assert res.epoch_loss[9] < res.epoch_loss[0]


def test_denoiser_preserves_shape_and_round_trips(tmp_path, sparse_data, denoiser):
    ds, _ = sparse_data
    den, _ = denoiser
    v = ds.targets[:3] + 0.1
    assert den(v, 0.1).shape == v.shape
    den.save(tmp_path / "den")
    back = hy.Denoiser.load(tmp_path / "den")
    np.testing.assert_array_equal(back(v, 0.1), den(v, 0.1))


def test_denoiser_contracts():
    bad = hy.Denoiser(lambda v, a: v[..., :-1])
    with pytest.raises(tc.ShapeError):
        bad(np.ones(4), 0.1)
    with pytest.raises(ValueError):
        hy.Denoiser(lambda v, a: v, kind="cnn")
    with pytest.raises(ValueError):
        hy.shrinkage_denoiser().save("unused")


def test_psnr_hand_value():
    assert hy.psnr(np.array([1.0, -1.0]), np.array([1.1, -0.9])) == pytest.approx(20.0, abs=1e-12)


# -- deep prior ---------------------------------------------------------------------------

def ridge_solution(G, H, x, lam):
    A = H @ G
    return np.linalg.solve(A.T @ A + 2 * lam * np.eye(G.shape[1]), A.T @ x)


@pytest.mark.parametrize("seed", range(3))
def test_linear_generator_reaches_ridge_closed_form(seed):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((20, 6))
    H = rng.standard_normal((12, 20)) / np.sqrt(12)
    x = rng.standard_normal(12)
    lam = 0.3
    gen = hy.Generator.linear(G)
    z, s, trace = hy.deep_prior_invert(gen, H, x, lam, steps=2000)
    z_star = ridge_solution(G, H, x, lam)
    f_star = float(hy.deep_prior_objective(gen, H, x, lam, z_star))
    assert (trace[-1] - f_star) / abs(f_star) <= 1e-6
    assert np.all(np.diff(trace) <= 0)
    np.testing.assert_allclose(s, G @ z, atol=1e-12)


def test_zero_data_gives_zero_code():
    rng = np.random.default_rng(0)
    gen = hy.Generator.linear(rng.standard_normal((8, 3)))
    z, s, trace = hy.deep_prior_invert(gen, rng.standard_normal((5, 8)), np.zeros(5), 0.1)
    np.testing.assert_array_equal(z, 0.0)
    assert trace == [0.0]


def test_restarts_never_worse():
    rng = np.random.default_rng(1)
    params = {"W0": rng.standard_normal((16, 3)), "b0": np.zeros(16),
              "W1": rng.standard_normal((10, 16)), "b1": np.zeros(10)}
    gen = hy.Generator.decoder(params)
    H = rng.standard_normal((6, 10))
    x = H @ np.asarray(gen(rng.standard_normal(3)))
    _, _, one = hy.deep_prior_invert(gen, H, x, 0.01, steps=200)
    _, _, many = hy.deep_prior_invert(gen, H, x, 0.01, steps=200, restarts=4)
    assert many[-1] <= one[-1]
    assert np.all(np.diff(many) <= 0)


def test_inversion_shape_check():
    gen = hy.Generator.linear(np.eye(4))
    with pytest.raises(tc.ShapeError):
        hy.deep_prior_invert(gen, np.ones((3, 5)), np.ones(3), 0.1)


def test_generator_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    params = {"W0": rng.standard_normal((8, 2)), "b0": rng.standard_normal(8),
              "W1": rng.standard_normal((5, 8)), "b1": rng.standard_normal(5)}
    for gen in (hy.Generator.linear(rng.standard_normal((5, 2))), hy.Generator.decoder(params)):
        gen.save(tmp_path / gen.kind)
        back = hy.Generator.load(tmp_path / gen.kind)
        z = rng.standard_normal((3, 2))
        np.testing.assert_array_equal(np.asarray(back(z)), np.asarray(gen(z)))


@pytest.fixture(scope="module")
def deep_prior_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("dp")
    base = {"schema_version": 1, "task": "deep-prior", "seed": 0}
    pinv = run_experiment({**base, "method": "pinv"}, out / "pinv").metrics
    dp = run_experiment({**base, "method": "deep-prior",
                         "train": {"lr": 0.05, "momentum": 0.9, "batch_size": 32, "epochs": 30}},
                        out / "dp").metrics
    return pinv, dp


def test_decoder_prior_not_worse_than_pseudo_inverse(deep_prior_runs):
    pinv, dp = deep_prior_runs
    assert dp["test_mse"] <= pinv["test_mse"]
