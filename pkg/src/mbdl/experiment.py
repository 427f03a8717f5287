"""Config-driven experiments: build a task, fit a method, evaluate, write a run.

A config is a JSON object::

    {"schema_version": 1, "task": "lasso", "method": "lista", "seed": 0,
     "dataset": {...}, "params": {...}, "train": {...}}

``dataset`` and ``params`` override the per-task and per-method defaults
below; ``train`` holds :class:`~mbdl.training.TrainConfig` fields.  A run
writes into ``<out>/<hash>/`` where ``hash`` is derived from the canonical
config:

``config.json``
    the fully resolved config.
``metrics.json``
    results; wall-clock figures live under the ``timing`` key, everything
    else is a pure function of the config.
``loss_trace.csv`` / ``val_trace.csv``
    mini-batch losses (``step,loss``) and validation losses per epoch
    (``epoch,val_loss``, epoch 0 is the initial rule), trained methods only.
``curve.csv``
    test error versus iteration or layer for LASSO methods
    (``index,mse,objective``, the objective averaged over test samples) and
    versus time step for filters (``index,mse``).
``params/``
    trained weights, in the tensor-plus-manifest layout.
``eval.json`` / ``eval_curve.csv``
    written by :func:`evaluate_run`, which reloads ``params/`` instead of
    training.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import hybrid as hy
from . import nets
from . import sparse as sp
from . import statespace as ss
from . import unfolded as uf
from .training import TrainConfig, gen_sparse_dataset, gen_trajectory_dataset, make_rng

__all__ = [
    "SCHEMA_VERSION",
    "ConfigError",
    "TASKS",
    "resolve_config",
    "load_config",
    "apply_overrides",
    "config_hash",
    "run_experiment",
    "evaluate_run",
    "lasso_data",
    "tracking_model",
    "tracking_data",
    "lorenz_model",
    "lorenz_data",
    "lqg_model",
    "deep_prior_data",
    "RunReport",
    "metrics_fingerprint",
    "write_csv",
]

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


TASKS = {
    "lasso": {
        "dataset": {"m": 32, "n": 64, "k": 5, "sigma": 0.05, "N": 2000, "splits": [0.5, 0.25, 0.25], "rho": 0.1},
        "methods": {
            "ista": {"K": 50, "mu": None},
            "fista": {"K": 50, "mu": None},
            "admm": {"lam": 1.0, "mu": 1.0, "max_iter": 5000, "tol": 1e-8},
            "lista": {"K": 10, "tie_layers": False, "mu": None},
            "unfolded-admm": {"K": 10, "lam": 1.0, "mu": 1.0, "mode": "full", "tie_layers": False},
            "learned-admm": {"lam": 10.0, "mu": 0.01, "budget": 100},
            "pnp-admm": {"lam": 0.5, "mu": 1.0, "alpha": 0.05, "schedule": "constant", "denoiser": "learned",
                         "alpha_range": [0.01, 0.5], "max_iter": 300, "tol": 1e-6},
        },
    },
    "linear-tracking": {
        "dataset": {"A": [[0.9, 0.2], [0.0, 0.9]], "C": [[1.0, 0.0]], "V": [[0.1, 0.0], [0.0, 0.1]],
                    "W": [[1.0]], "T": 100, "N": 320, "splits": [0.4, 0.1, 0.5], "obs": "linear"},
        "methods": {
            "kf": {},
            "kalmannet": {"hidden": 32, "window": 50},
            "fit-covariances": {"V0_scale": 10.0, "W0_scale": 10.0, "window": 50},
            "feature-kalman": {"width": 32},
        },
    },
    "lorenz": {
        "dataset": {"q2": 0.01, "r2": 1.0, "dt": 0.02, "J": 5, "truth": "rk4", "substeps": 10,
                    "T_train": 1000, "N_train": 32, "N_val": 8, "T_test": 3000, "N_test": 8},
        "methods": {
            "ekf": {"V_scale": 1.0},
            "kalmannet": {"hidden": 32, "window": 50},
        },
    },
    "lqg": {
        "dataset": {"A": [[1.2]], "B": [[1.0]], "C": [[1.0]], "Q": [[1.0]], "R": [[1.0]], "V": [[1.0]],
                    "W": [[1.0]], "T": 50, "N": 100},
        "methods": {"lqg": {}, "mpc": {"H": 20}, "zero": {}},
    },
    "deep-prior": {
        "dataset": {"n": 32, "latent": 4, "m": 12, "N": 3000, "sigma": 0.01, "N_test": 50},
        "methods": {
            "deep-prior": {"d": 4, "width": 64, "lam": 1e-3, "steps": 300, "restarts": 0},
            "pinv": {},
        },
    },
}

TRAINED = {"lista", "unfolded-admm", "learned-admm", "pnp-admm", "kalmannet", "fit-covariances",
           "feature-kalman", "deep-prior"}


# -- config handling ---------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides) -> dict:
    """Apply ``key=value`` strings; dotted keys reach into sections, values parse as JSON if they can."""
    cfg = copy.deepcopy(config)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _parse_value(value)
    return cfg


def resolve_config(config: dict) -> dict:
    """Validate and fill defaults; raises :class:`ConfigError` listing valid options."""
    if not isinstance(config, dict) or not config:
        raise ConfigError("config must be a non-empty JSON object with schema_version, task and method")
    unknown = set(config) - {"schema_version", "task", "method", "seed", "dataset", "params", "train", "name"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    if config.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {config.get('schema_version')!r}")
    task = config.get("task")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; valid tasks: {sorted(TASKS)}")
    spec = TASKS[task]
    method = config.get("method")
    if method not in spec["methods"]:
        raise ConfigError(f"unknown method {method!r} for task {task!r}; valid methods: {sorted(spec['methods'])}")
    out = {"schema_version": SCHEMA_VERSION, "task": task, "method": method, "seed": int(config.get("seed", 0))}
    for section, defaults in (("dataset", spec["dataset"]), ("params", spec["methods"][method])):
        given = config.get(section, {}) or {}
        extra = set(given) - set(defaults)
        if extra:
            raise ConfigError(f"unknown {section} keys {sorted(extra)}; valid: {sorted(defaults)}")
        out[section] = {**copy.deepcopy(defaults), **given}
    train = config.get("train", {}) or {}
    try:
        TrainConfig.from_dict({**train, "seed": out["seed"]})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train settings: {exc}") from None
    out["train"] = dict(train)
    if "name" in config:
        out["name"] = str(config["name"])
    return out


def load_config(path, overrides=(), seed: Optional[int] = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    text = path.read_text()
    if not text.strip():
        raise ConfigError(f"{path}: empty config; expected an object with schema_version, task and method")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = apply_overrides(cfg, overrides)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(_canonical(resolve_config(config)).encode()).hexdigest()[:16]


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def metrics_fingerprint(path) -> str:
    """Canonical ``metrics.json`` content without the ``timing`` block."""
    data = json.loads(Path(path).read_text())
    data.pop("timing", None)
    return _canonical(data)


@dataclass
class RunReport:
    run_dir: Path
    metrics: dict


# -- tasks -------------------------------------------------------------------

def _db(x):
    return float(10.0 * np.log10(x))


def _sum_mse(pred, target):
    return float(np.mean(np.sum((np.asarray(pred) - np.asarray(target)) ** 2, axis=-1)))


def lasso_data(d, seed):
    """``(dataset, problem)`` for the lasso task."""
    ds = gen_sparse_dataset(d["m"], d["n"], d["k"], d["sigma"], d["N"], seed, splits=d["splits"])
    return ds, sp.SparseProblem(ds.extras["H"], rho=d["rho"], sigma2=d["sigma"] ** 2)


def tracking_model(d):
    return ss.StateSpaceModel(A=d["A"], C=d["C"], V=d["V"], W=d["W"])


def tracking_data(d, seed):
    """``(model, dataset)`` for linear tracking, with linear or cubic observations."""
    if d["obs"] not in ("linear", "cubic"):
        raise ConfigError("dataset.obs must be 'linear' or 'cubic'")
    model = tracking_model(d)
    transform = ss.cubic_observation if d["obs"] == "cubic" else None
    return model, gen_trajectory_dataset(model, d["T"], d["N"], seed, splits=d["splits"], obs_transform=transform)


def lorenz_model(d):
    return ss.LorenzSystem(dt=d["dt"], J=d["J"], V=d["q2"] * np.eye(3), W=d["r2"] * np.eye(3),
                           truth=d["truth"], substeps=d["substeps"])


def lorenz_data(d, seed):
    """``(model, train, test)``; training data use seed ``2 s``, test data ``2 s + 1``."""
    model = lorenz_model(d)
    N = d["N_train"] + d["N_val"]
    train = gen_trajectory_dataset(model, d["T_train"], N, 2 * seed, splits=(d["N_train"] / N, d["N_val"] / N, 0.0))
    test = gen_trajectory_dataset(model, d["T_test"], d["N_test"], 2 * seed + 1, splits=(0.0, 0.0, 1.0))
    return model, train, test


def lqg_model(d):
    return ss.StateSpaceModel(A=d["A"], B=d["B"], C=d["C"], Q=d["Q"], R=d["R"], V=d["V"], W=d["W"])


def deep_prior_data(d, seed):
    """Signals ``tanh(M z / 2)`` with Gaussian ``z``.

    Returns ``(sample, H, S_test, X_test)`` where ``sample(N, stream)`` draws
    training signals.
    """
    n, m = d["n"], d["m"]
    M = make_rng(seed, 40).standard_normal((n, d["latent"]))

    def sample(N, stream):
        z = make_rng(seed, stream).standard_normal((N, d["latent"]))
        return np.tanh(z @ M.T / 2.0)

    H = make_rng(seed, 42).standard_normal((m, n)) / np.sqrt(m)
    St = sample(d["N_test"], 43)
    Xt = St @ H.T + d["sigma"] * make_rng(seed, 44).standard_normal((d["N_test"], m))
    return sample, H, St, Xt


def _load_encoder(directory):
    params, manifest = nets.load_weights(directory)
    return ss.MLPEncoder(params, np.asarray(manifest["scale"], dtype=float))


class _Run:
    def __init__(self, cfg, run_dir, load_from=None):
        self.cfg = cfg
        self.load_from = None if load_from is None else Path(load_from)
        self.seed = cfg["seed"]
        self.data = cfg["dataset"]
        self.prm = cfg["params"]
        self.train = TrainConfig.from_dict({**cfg["train"], "seed": self.seed})
        self.run_dir = run_dir
        self.metrics: dict = {}
        self.curve = None
        self.fit = None

    def record_fit(self, result):
        self.fit = result
        self.metrics["epochs"] = len(result.epoch_loss)
        self.metrics["best_epoch"] = result.best_epoch
        self.metrics["diverged"] = bool(result.diverged)
        if result.val_loss:
            self.metrics["val_loss_initial"] = float(result.val_loss[0])
            self.metrics["val_loss_best"] = float(min(result.val_loss))

    def obtain(self, train, save, load):
        """Train (recording the fit and saving weights) or load saved weights."""
        if self.load_from is not None:
            return load(self.load_from)
        obj, result = train()
        self.record_fit(result)
        save(obj, self.run_dir / "params")
        return obj

    # lasso ------------------------------------------------------------------
    def lasso(self, method):
        d = self.data
        ds, p = lasso_data(d, self.seed)
        Xt, St = ds.take(ds.test)
        prm = self.prm
        curve = []

        n_test = len(Xt)

        def point(k, coef, signal):
            return (k, _sum_mse(signal, St), sp.lasso_objective(p, Xt, coef) / n_test)

        def tracker(k, r, *_):
            curve.append(point(k, r, p.synthesize(r)))

        if method in ("ista", "fista"):
            solver = sp.ista if method == "ista" else sp.fista
            pred = solver(p, Xt, mu=prm["mu"], K=prm["K"], callback=tracker)
        elif method == "admm":
            hyper = sp.AdmmHyper(prm["lam"], prm["mu"], prm["max_iter"], prm["tol"])
            pred = sp.admm(p, Xt, hyper, callback=tracker)
        elif method in ("lista", "unfolded-admm"):
            if method == "lista":
                net = uf.lista_init(p, mu=prm["mu"], K=prm["K"], tie_layers=prm["tie_layers"])
            else:
                net = uf.admm_init(p, sp.AdmmHyper(prm["lam"], prm["mu"]), K=prm["K"],
                                   tie_layers=prm["tie_layers"], mode=prm["mode"])
            net = self.obtain(lambda: (lambda t: (t, t.history))(uf.train_unfolded(net, ds, self.train)),
                              lambda net, d: uf.save_params(net, d, method), uf.load_params)
            pred = self._layer_curve(net, Xt, point)
        elif method == "learned-admm":
            hyper0 = sp.AdmmHyper(prm["lam"], prm["mu"])

            def train():
                _, net = uf.learned_admm_tune(p, hyper0, ds, self.train, budget=prm["budget"], return_params=True)
                return net, net.history

            net = self.obtain(train, lambda net, d: uf.save_params(net, d, "learned-admm"), uf.load_params)
            self.metrics["tuned_lam"] = float(net.lam[0])
            self.metrics["tuned_mu"] = float(net.mu[0])
            pred = self._layer_curve(net, Xt, point)
        elif method == "pnp-admm":
            hyper = sp.AdmmHyper(prm["lam"], prm["mu"], prm["max_iter"], prm["tol"])
            if prm["denoiser"] == "learned":
                den = self.obtain(
                    lambda: hy.train_denoiser(ds.targets[ds.train], self.train, alpha_range=tuple(prm["alpha_range"])),
                    lambda den, d: den.save(d), hy.Denoiser.load)
            elif prm["denoiser"] == "shrinkage":
                den = hy.shrinkage_denoiser()
            else:
                raise ConfigError("pnp-admm denoiser must be 'learned' or 'shrinkage'")
            pred, info = hy.pnp_admm(p, Xt, hyper, den, alpha=prm["alpha"], schedule=prm["schedule"],
                                     callback=tracker, return_info=True)
            self.metrics["iterations"] = info["iterations"]
            self.metrics["final_residual"] = info["residual"]
        self.curve = self.curve or curve
        mse = _sum_mse(pred, St)
        self.metrics.update(test_mse=mse, test_mse_db=_db(mse))

    def _layer_curve(self, net, Xt, point):
        # The lasso task uses the identity dictionary, so layer outputs are coefficients.
        outs = uf.layer_outputs(net, Xt)
        self.curve = [point(k + 1, o, o) for k, o in enumerate(outs)]
        return outs[-1]

    def _step_curve(self, pred, Z):
        err = np.mean((np.asarray(pred) - Z) ** 2, axis=(0, 2))
        self.curve = [(t + 1, float(e)) for t, e in enumerate(err)]

    # linear tracking -------------------------------------------------------
    def linear_tracking(self, method):
        model, ds = tracking_data(self.data, self.seed)
        Xt, Zt = ds.take(ds.test)
        prm = self.prm
        if method == "kf":
            pred = ss.kalman_filter(model, Xt)
        elif method == "kalmannet":
            net = self._gain_network(model, ds)
            pred = ss.kalmannet_filter(model, net, Xt)
        elif method == "fit-covariances":
            V0, W0 = prm["V0_scale"] * np.asarray(model.V), prm["W0_scale"] * np.asarray(model.W)

            def train():
                V, W, res = ss.fit_covariances(model, ds, self.train, V0=V0, W0=W0, window=prm["window"])
                return {"V": V, "W": W}, res

            cov = self.obtain(train, lambda c, d: nets.save_weights(d, c, "covariances"),
                              lambda d: nets.load_weights(d)[0])
            V, W = cov["V"], cov["W"]
            self.metrics["V"] = V.tolist()
            self.metrics["W"] = W.tolist()
            init_mse = ss.state_mse(ss.kalman_filter(model.replace(V=V0, W=W0), Xt), Zt)
            self.metrics["initial_guess_test_mse"] = init_mse
            self.metrics["true_cov_test_mse"] = ss.state_mse(ss.kalman_filter(model, Xt), Zt)
            pred = ss.kalman_filter(model.replace(V=V, W=W), Xt)
        elif method == "feature-kalman":
            scale = Xt.reshape(-1, model.q).std(axis=0)
            enc = ss.MLPEncoder.create(model.q, width=prm["width"], seed=self.seed, scale=scale)
            untrained = ss.learned_feature_filter(model, enc, Xt)
            self.metrics["untrained_test_mse"] = ss.state_mse(np.stack(untrained, axis=1), Zt)
            enc = self.obtain(
                lambda: ss.train_feature_encoder(enc, model, ds, self.train),
                lambda e, d: nets.save_weights(d, e.params, "feature-encoder", {"scale": e.scale.tolist()}),
                _load_encoder)
            pred = np.stack(ss.learned_feature_filter(model, enc, Xt), axis=1)
        self._step_curve(pred, Zt)
        mse = ss.state_mse(pred, Zt)
        self.metrics.update(test_mse=mse, test_mse_db=_db(mse))

    def _gain_network(self, model, ds):
        prm = self.prm

        def train():
            net = ss.GainNetwork.create(model.n, model.q, hidden=prm["hidden"], seed=self.seed, C=model.C,
                                        scale=ss.feature_scale(ds))
            return ss.train_kalmannet(net, model, ds, self.train, window=prm["window"])

        return self.obtain(train, lambda net, d: net.save(d), ss.GainNetwork.load)

    # lorenz ------------------------------------------------------------------
    def lorenz(self, method):
        model, train, test = lorenz_data(self.data, self.seed)
        Xt, Zt = test.take(test.test)
        prm = self.prm
        if method == "ekf":
            pred = ss.ekf_filter(model, Xt, V=prm["V_scale"] * np.asarray(model.V))
        else:
            net = self._gain_network(model, train)
            pred = ss.kalmannet_filter(model, net, Xt)
        self._step_curve(pred, Zt)
        mse = ss.state_mse(pred, Zt)
        self.metrics.update(test_mse=mse, test_mse_db=_db(mse))

    # lqg -------------------------------------------------------------------------
    def lqg(self, method):
        d = self.data
        model = lqg_model(d)
        if method == "lqg":
            policy = ss.LQGController(model)
        elif method == "mpc":
            policy = ss.MPCController(model, self.prm["H"])
        else:
            policy = None
        costs = [ss.control_cost(model, tr)
                 for tr in ss.simulate_many(model, d["T"], [(self.seed, i) for i in range(d["N"])], policy)]
        self.metrics.update(mean_cost=float(np.mean(costs)), cost_std=float(np.std(costs)))

    # deep prior ----------------------------------------------------------------
    def deep_prior(self, method):
        d = self.data
        sample, H, St, Xt = deep_prior_data(d, self.seed)
        if method == "pinv":
            pred = Xt @ np.linalg.pinv(H).T
        else:
            prm = self.prm
            gen = self.obtain(lambda: hy.train_autoencoder(sample(d["N"], 41), prm["d"], self.train, width=prm["width"]),
                              lambda g, dr: g.save(dr), hy.Generator.load)
            pred = np.stack([hy.deep_prior_invert(gen, H, x, prm["lam"], steps=prm["steps"],
                                                  restarts=prm["restarts"], seed=self.seed)[1] for x in Xt])
        mse = float(np.mean((pred - St) ** 2))
        self.metrics.update(test_mse=mse, test_mse_db=_db(mse))


def _execute(cfg, run_dir, load_from=None):
    run = _Run(cfg, run_dir, load_from)
    t0 = time.perf_counter()
    getattr(run, cfg["task"].replace("-", "_"))(cfg["method"])
    return run, time.perf_counter() - t0


def _write_curve(path, curve):
    header = ["index", "mse", "objective"] if len(curve[0]) == 3 else ["index", "mse"]
    write_csv(path, header, curve)


def run_experiment(config, out_dir="runs") -> RunReport:
    """Run one config (a dict or a JSON file path) and write its run directory."""
    if not isinstance(config, dict):
        config = load_config(config)
    cfg = resolve_config(config)
    digest = hashlib.sha256(_canonical(cfg).encode()).hexdigest()[:16]
    run_dir = Path(out_dir) / digest
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    run, runtime = _execute(cfg, run_dir)
    metrics = {
        "schema_version": SCHEMA_VERSION,
        "task": cfg["task"],
        "method": cfg["method"],
        "seed": cfg["seed"],
        "config_hash": digest,
        **run.metrics,
        "timing": {"runtime_s": runtime, "finished_unix": time.time()},
    }
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    if run.fit is not None:
        write_csv(run_dir / "loss_trace.csv", ["step", "loss"], enumerate(run.fit.trace))
        write_csv(run_dir / "val_trace.csv", ["epoch", "val_loss"], enumerate(run.fit.val_loss))
    if run.curve:
        _write_curve(run_dir / "curve.csv", run.curve)
    return RunReport(run_dir, metrics)


def evaluate_run(run_dir) -> RunReport:
    """Re-evaluate a finished run from its ``config.json`` and saved ``params/``.

    Nothing is trained; the data are regenerated from the config.  Writes
    ``eval.json`` (same layout as ``metrics.json``) and ``eval_curve.csv``.
    """
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise FileNotFoundError(f"{cfg_path} not found; expected a run directory")
    cfg = resolve_config(json.loads(cfg_path.read_text()))
    params_dir = run_dir / "params"
    if cfg["method"] in TRAINED and not (cfg["method"] == "pnp-admm" and cfg["params"]["denoiser"] != "learned"):
        if not (params_dir / "manifest.json").exists():
            raise FileNotFoundError(f"{params_dir} holds no saved parameters")
    else:
        params_dir = None
    run, runtime = _execute(cfg, run_dir, load_from=params_dir)
    metrics = {"schema_version": SCHEMA_VERSION, "task": cfg["task"], "method": cfg["method"], "seed": cfg["seed"],
               "config_hash": run_dir.name, **run.metrics, "timing": {"runtime_s": runtime, "finished_unix": time.time()}}
    (run_dir / "eval.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    if run.curve:
        _write_curve(run_dir / "eval_curve.csv", run.curve)
    return RunReport(run_dir, metrics)
