"""Experiment configs used by the training-based acceptance criteria.

``full`` configs carry the budgets named in the criteria; ``quick`` variants
shrink training where the outcome is known to be insensitive to it.
"""

import copy


def _cfg(task, method, seed=0, dataset=None, params=None, train=None):
    return {"schema_version": 1, "task": task, "method": method, "seed": seed,
            "dataset": dataset or {}, "params": params or {}, "train": train or {}}


# LISTA against ISTA-50: 1000 training samples out of 2000.
LISTA = _cfg("lasso", "lista", seed=0,
             dataset={"N": 2000, "splits": [0.5, 0.25, 0.25]},
             params={"K": 10, "tie_layers": True},
             train={"lr": 1e-3, "momentum": 0.9, "batch_size": 32, "epochs": 200})
ISTA50 = _cfg("lasso", "ista", seed=0, dataset={"N": 2000, "splits": [0.5, 0.25, 0.25]}, params={"K": 50})

# ADMM hyperparameters tuned from lam=10, mu=0.01.
LEARNED_ADMM = _cfg("lasso", "learned-admm", seed=1,
                    dataset={"N": 400, "splits": [0.5, 0.25, 0.25]},
                    params={"lam": 10.0, "mu": 0.01, "budget": 100},
                    train={"lr": 0.1, "momentum": 0.9, "batch_size": 32, "epochs": 10})

# Linear-Gaussian tracking: 128 train, 32 validation, 200 test trajectories.
_TRACK = {"T": 100, "N": 360, "splits": [128 / 360, 32 / 360, 200 / 360]}
KALMANNET_LINEAR = _cfg("linear-tracking", "kalmannet", seed=1, dataset=_TRACK,
                        train={"lr": 1e-2, "momentum": 0.9, "batch_size": 16, "epochs": 30, "clip": 1.0})
KF_LINEAR = _cfg("linear-tracking", "kf", seed=1, dataset=_TRACK)
FIT_COVARIANCES = _cfg("linear-tracking", "fit-covariances", seed=1, dataset=_TRACK,
                       params={"V0_scale": 10.0, "W0_scale": 10.0},
                       train={"lr": 1.0, "momentum": 0.9, "batch_size": 16, "epochs": 20})

# Lorenz benchmark with T=3000 test trajectories.
KALMANNET_LORENZ = _cfg("lorenz", "kalmannet", seed=0,
                        train={"lr": 1e-2, "momentum": 0.9, "batch_size": 16, "epochs": 40, "clip": 1.0})
EKF_LORENZ = _cfg("lorenz", "ekf", seed=0)
EKF_LORENZ_TUNED = _cfg("lorenz", "ekf", seed=0, params={"V_scale": 10.0})


def quick(cfg: dict) -> dict:
    """Reduced-budget copy of a config for ``suite --quick``."""
    out = copy.deepcopy(cfg)
    if out["task"] == "lorenz" and out["method"] == "kalmannet":
        out["dataset"].update({"N_train": 16, "N_val": 4})
        out["train"]["epochs"] = 15
    return out


def determinism_configs(quick_mode: bool = False) -> list:
    """Small configs touching every task and method, run twice each."""
    small_lasso = {"N": 120}
    small_track = {"T": 30, "N": 40}
    small_lorenz = {"T_train": 60, "N_train": 4, "N_val": 2, "T_test": 100, "N_test": 2}
    one = {"epochs": 1, "batch_size": 16}
    cfgs = [
        _cfg("lasso", "ista", dataset=small_lasso),
        _cfg("lasso", "fista", dataset=small_lasso),
        _cfg("lasso", "admm", dataset=small_lasso),
        _cfg("lasso", "lista", dataset=small_lasso, train=one),
        _cfg("lasso", "unfolded-admm", dataset=small_lasso, train=one),
        _cfg("lasso", "learned-admm", dataset=small_lasso, params={"budget": 20}, train=one),
        _cfg("lasso", "pnp-admm", dataset=small_lasso, train=one),
        _cfg("linear-tracking", "kf", dataset=small_track),
        _cfg("linear-tracking", "kalmannet", dataset=small_track, train=one),
        _cfg("linear-tracking", "fit-covariances", dataset=small_track, train=one),
        _cfg("linear-tracking", "feature-kalman", dataset={**small_track, "obs": "cubic"}, train=one),
        _cfg("lorenz", "ekf", dataset=small_lorenz),
        _cfg("lorenz", "kalmannet", dataset=small_lorenz, train={"epochs": 1, "batch_size": 2}),
        _cfg("lqg", "lqg", dataset={"N": 10}),
        _cfg("lqg", "mpc", dataset={"N": 10}),
        _cfg("lqg", "zero", dataset={"N": 10}),
        _cfg("deep-prior", "deep-prior", dataset={"N": 200, "N_test": 3}, params={"steps": 30}, train=one),
        _cfg("deep-prior", "pinv", dataset={"N_test": 3}),
    ]
    if quick_mode:
        keep = {"lista", "kalmannet", "pnp-admm", "mpc", "deep-prior"}
        cfgs = [c for c in cfgs if c["method"] in keep and c["task"] != "lorenz"]
    return cfgs
