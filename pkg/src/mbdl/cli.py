"""Command-line entry point: ``mbdl VERB [options]``.

Verbs
-----
solve      run one solver on a problem and write the solution plus a trace
train      run an experiment config (training included) into a run directory
eval       re-evaluate a finished run from its saved parameters
gen-data   write a task's synthetic data as tensor files with a manifest
bench      run several methods of one task and tabulate them
suite      run the acceptance criteria

Exit codes: 0 success, 1 numerical failure (or a failed criterion), 2
configuration, usage or missing-file errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import experiment as ex
from . import hybrid as hy
from . import sparse as sp
from . import statespace as ss
from . import tensor as tc
from . import unfolded as uf

EXIT_OK, EXIT_NUMERICAL, EXIT_CONFIG = 0, 1, 2

SPARSE_METHODS = ("ista", "fista", "admm", "lista", "unfolded-admm", "pnp-admm")
FILTER_METHODS = ("kf", "ekf", "kalmannet")
CONTROL_METHODS = ("lqg", "mpc")
SOLVE_METHODS = SPARSE_METHODS + ("deep-prior",) + FILTER_METHODS + CONTROL_METHODS

SOLVE_DEFAULTS = {
    "ista": {"K": 2000, "mu": None},
    "fista": {"K": 500, "mu": None},
    "admm": {"lam": 1.0, "mu": 1.0, "max_iter": 100000, "tol": 1e-8},
    "lista": {"K": 10, "mu": None},
    "unfolded-admm": {"K": 10, "lam": 1.0, "mu": 1.0, "mode": "full"},
    "pnp-admm": {"lam": 1.0, "mu": 1.0, "max_iter": 5000, "tol": 1e-8, "alpha": None,
                 "schedule": "constant", "decay": 0.97},
    "deep-prior": {"lam": 1e-3, "steps": 500, "lr": 1.0, "restarts": 0},
    "kf": {},
    "ekf": {},
    "kalmannet": {},
    "lqg": {"T": 50, "horizon": None},
    "mpc": {"T": 50, "H": 20},
}
SOLVE_KEYS = {"schema_version", "method", "seed", "problem", "model", "x", "simulate", "weights", "params"}
LASSO_GENERATE = {"m": 32, "n": 64, "k": 5, "sigma": 0.05, "rho": 0.1, "N": 1}


class UsageError(ex.ConfigError):
    pass


# -- config helpers -----------------------------------------------------------

def _read_config(path, overrides, seed):
    if path is None:
        raise UsageError("--config is required for this verb")
    return ex.load_config(path, overrides, seed)


def _resolve_path(base: Path, name) -> Path:
    p = Path(name)
    return p if p.is_absolute() else base / p


def _thread_cap() -> int:
    raw = os.environ.get("MBDL_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ex.ConfigError(f"MBDL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ex.ConfigError(f"MBDL_THREADS must be a positive integer, got {raw!r}")
    return n


# -- solve ---------------------------------------------------------------------

class _Trace:
    """Collects ``iter, objective, residual, wall_ns`` rows."""

    def __init__(self):
        self.t0 = time.perf_counter_ns()
        self.rows = []

    def add(self, k, objective, residual):
        self.rows.append((int(k), float(objective), float(residual), time.perf_counter_ns() - self.t0))


def _solve_config(cfg):
    if not isinstance(cfg, dict) or not cfg:
        raise ex.ConfigError("solve config must be a non-empty JSON object with schema_version and method")
    unknown = set(cfg) - SOLVE_KEYS
    if unknown:
        raise ex.ConfigError(f"unknown solve config keys {sorted(unknown)}; valid: {sorted(SOLVE_KEYS)}")
    if cfg.get("schema_version") != ex.SCHEMA_VERSION:
        raise ex.ConfigError(f"schema_version must be {ex.SCHEMA_VERSION}, got {cfg.get('schema_version')!r}")
    method = cfg.get("method")
    if method not in SOLVE_METHODS:
        raise ex.ConfigError(f"unknown method {method!r}; valid methods: {sorted(SOLVE_METHODS)}")
    given = cfg.get("params", {}) or {}
    extra = set(given) - set(SOLVE_DEFAULTS[method])
    if extra:
        raise ex.ConfigError(f"unknown params {sorted(extra)} for {method}; valid: {sorted(SOLVE_DEFAULTS[method])}")
    return method, {**SOLVE_DEFAULTS[method], **given}


def _sparse_inputs(cfg, base, seed):
    prob = cfg.get("problem", {"generate": {}})
    if "file" in prob:
        p = sp.SparseProblem.load(_resolve_path(base, prob["file"]))
        if "x" not in cfg:
            raise ex.ConfigError("a problem file needs an observation tensor under 'x'")
        return p, tc.load_tensor(_resolve_path(base, cfg["x"])), None
    if "generate" not in prob:
        raise ex.ConfigError("problem needs 'file' or 'generate'")
    gen = {**LASSO_GENERATE, **prob["generate"]}
    extra = set(gen) - set(LASSO_GENERATE)
    if extra:
        raise ex.ConfigError(f"unknown problem.generate keys {sorted(extra)}; valid: {sorted(LASSO_GENERATE)}")
    ds, p = ex.lasso_data({**gen, "splits": [1.0, 0.0, 0.0]}, seed)
    x = tc.load_tensor(_resolve_path(base, cfg["x"])) if "x" in cfg else ds.inputs
    truth = None if "x" in cfg else ds.targets
    if gen["N"] == 1 and "x" not in cfg:
        x, truth = x[0], truth[0]
    return p, x, truth


def _solve_sparse(method, prm, cfg, base, seed, trace):
    p, x, truth = _sparse_inputs(cfg, base, seed)

    def cb(k, r, resid):
        trace.add(k, sp.lasso_objective(p, x, r), resid)

    if method in ("ista", "fista"):
        solver = sp.ista if method == "ista" else sp.fista
        sol = solver(p, x, mu=prm["mu"], K=prm["K"], callback=cb)
    elif method == "admm":
        sol = sp.admm(p, x, sp.AdmmHyper(prm["lam"], prm["mu"], prm["max_iter"], prm["tol"]), callback=cb)
    elif method == "pnp-admm":
        den = hy.Denoiser.load(_resolve_path(base, cfg["weights"])) if "weights" in cfg else hy.shrinkage_denoiser()
        hyper = sp.AdmmHyper(prm["lam"], prm["mu"], prm["max_iter"], prm["tol"])
        sol = hy.pnp_admm(p, x, hyper, den, alpha=prm["alpha"], schedule=prm["schedule"], decay=prm["decay"],
                          callback=cb)
    else:
        if "weights" in cfg:
            net = uf.load_params(_resolve_path(base, cfg["weights"]))
        elif method == "lista":
            net = uf.lista_init(p, mu=prm["mu"], K=prm["K"])
        else:
            net = uf.admm_init(p, sp.AdmmHyper(prm["lam"], prm["mu"]), K=prm["K"], mode=prm["mode"])
        if p.Psi is not None:
            raise ex.ConfigError("unfolded solvers in solve support the identity dictionary only")
        prev = [0.0]

        def layer_cb(k, s):
            trace.add(k, sp.lasso_objective(p, x, s), np.linalg.norm(s - prev[0]))
            prev[0] = s

        sol = uf.layer_outputs(net, x, callback=layer_cb)[-1]
    summary = {"objective": trace.rows[-1][1]}
    if truth is not None:
        summary["mse_to_truth"] = float(np.mean(np.sum((sol - truth) ** 2, axis=-1)))
    return {"solution": sol}, summary


def _solve_deep_prior(prm, cfg, base, seed, trace):
    if "weights" not in cfg:
        raise ex.ConfigError("deep-prior needs a trained generator directory under 'weights'")
    prob = cfg.get("problem", {})
    if "file" not in prob or "x" not in cfg:
        raise ex.ConfigError("deep-prior needs problem.file (for H) and an observation tensor 'x'")
    p = sp.SparseProblem.load(_resolve_path(base, prob["file"]))
    x = tc.load_tensor(_resolve_path(base, cfg["x"]))
    if x.ndim != 1:
        raise ex.ConfigError("deep-prior solve takes a single observation vector")
    gen = hy.Generator.load(_resolve_path(base, cfg["weights"]))
    last = [None]

    def cb(k, z, f):
        trace.add(k, f, 0.0 if last[0] is None else abs(last[0] - f))
        last[0] = f

    z, s, tr = hy.deep_prior_invert(gen, p.H, x, prm["lam"], steps=prm["steps"], lr=prm["lr"],
                                    restarts=prm["restarts"], seed=seed, callback=cb)
    return {"solution": s, "latent": z}, {"objective": float(tr[-1])}


def _model_from(spec):
    spec = dict(spec)
    kind = spec.pop("type", "linear")
    if kind == "linear":
        return ss.StateSpaceModel(**spec)
    if kind == "lorenz":
        d = {**ex.TASKS["lorenz"]["dataset"], **spec}
        return ex.lorenz_model(d)
    raise ex.ConfigError(f"model.type must be 'linear' or 'lorenz', got {kind!r}")


def _observations(cfg, base, model, seed):
    if "x" in cfg:
        X = tc.load_tensor(_resolve_path(base, cfg["x"]))
        return (X if X.ndim == 3 else X[None]), None, X.ndim == 2
    sim = {"T": 100, "N": 1, **(cfg.get("simulate") or {})}
    trajs = ss.simulate_many(model, sim["T"], [(seed, i) for i in range(sim["N"])])
    return np.stack([t.x for t in trajs]), np.stack([t.z for t in trajs]), False


def _solve_filter(method, cfg, base, seed, trace):
    if "model" not in cfg:
        raise ex.ConfigError(f"{method} needs a 'model' section")
    model = _model_from(cfg["model"])
    if method == "kf" and isinstance(model, ss.LorenzSystem):
        raise ex.ConfigError("kf needs a linear model; use ekf for the Lorenz system")
    X, Z, single = _observations(cfg, base, model, seed)
    prev = [np.broadcast_to(np.asarray(model.z0, dtype=float), (len(X), model.n))]

    def cb(t, z):
        resid = X[:, t - 1] - np.asarray(model.observe(z))
        trace.add(t, np.mean(np.sum(resid ** 2, axis=-1)), np.mean(np.linalg.norm(z - prev[0], axis=-1)))
        prev[0] = np.array(z)

    if method == "kf":
        est = ss.kalman_filter(model, X, callback=cb)
    elif method == "ekf":
        est = ss.ekf_filter(model, X, callback=cb)
    else:
        if "weights" not in cfg:
            raise ex.ConfigError("kalmannet needs a trained gain network directory under 'weights'")
        est = ss.kalmannet_filter(model, ss.GainNetwork.load(_resolve_path(base, cfg["weights"])), X, callback=cb)
    summary = {}
    if Z is not None:
        mse = ss.state_mse(est, Z)
        summary.update(state_mse=mse, state_mse_db=float(10 * np.log10(mse)))
    out = {"estimates": est[0] if single else est}
    if Z is not None:
        out["states"] = Z
    return out, summary


def _solve_control(method, prm, cfg, seed, trace):
    if "model" not in cfg:
        raise ex.ConfigError(f"{method} needs a 'model' section")
    model = _model_from(cfg["model"])
    if isinstance(model, ss.LorenzSystem) or model.p == 0:
        raise ex.ConfigError(f"{method} needs a linear model with a control matrix B")
    ctl = ss.LQGController(model, prm["horizon"]) if method == "lqg" else ss.MPCController(model, prm["H"])
    estimates, stamps = [], []

    def policy(t, x):
        s = ctl(t, x)
        estimates.append(np.array(ctl.state.z_hat))
        stamps.append(time.perf_counter_ns() - trace.t0)
        return s

    traj = ss.simulate(model, policy, T=prm["T"], seed=seed)
    Q, R = np.asarray(model.Q), np.asarray(model.R)
    # Row t: stage cost of z_t and s_{t-1}, estimation error of z_t once x_t was seen.
    for t in range(1, prm["T"] + 1):
        z, s = traj.z[t - 1], traj.s[t - 1]
        err = np.linalg.norm(z - estimates[t]) if t < len(estimates) else float("nan")
        stamp = stamps[t] if t < len(stamps) else time.perf_counter_ns() - trace.t0
        trace.rows.append((t, float(z @ Q @ z + s @ R @ s), float(err), stamp))
    return {"actions": traj.s, "states": traj.z, "observations": traj.x, "estimates": np.asarray(estimates)}, {
        "mean_cost": ss.control_cost(model, traj)}


def cmd_solve(args) -> int:
    cfg = _read_config(args.config, args.set, args.seed)
    if args.method:
        cfg["method"] = args.method
    method, prm = _solve_config(cfg)
    base = Path(args.config).parent
    seed = int(cfg.get("seed", 0))
    trace = _Trace()
    t0 = time.perf_counter()
    if method in SPARSE_METHODS:
        tensors, summary = _solve_sparse(method, prm, cfg, base, seed, trace)
    elif method == "deep-prior":
        tensors, summary = _solve_deep_prior(prm, cfg, base, seed, trace)
    elif method in FILTER_METHODS:
        tensors, summary = _solve_filter(method, cfg, base, seed, trace)
    else:
        tensors, summary = _solve_control(method, prm, cfg, seed, trace)
    runtime = time.perf_counter() - t0
    rows = np.asarray([r[1:3] for r in trace.rows], dtype=float)
    if rows.size and not np.all(np.isfinite(rows[:, 0])):
        raise sp.NumericalError(f"{method} produced a non-finite objective")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in tensors.items():
        tc.save_tensor(out / f"{name}.mbt", np.asarray(arr, dtype=float))
    ex.write_csv(out / "trace.csv", ["iter", "objective", "residual", "wall_ns"], trace.rows)
    summary = {"method": method, "params": prm, "iterations": len(trace.rows), "runtime_s": runtime,
               "files": sorted(f"{n}.mbt" for n in tensors) + ["trace.csv"], **summary}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
    print(json.dumps({k: v for k, v in summary.items() if k != "params"}, sort_keys=True, default=float))
    return EXIT_OK


# -- train / eval ----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _read_config(args.config, args.set, args.seed)
    if args.method:
        cfg["method"] = args.method
    report = ex.run_experiment(cfg, args.out)
    print(f"run directory: {report.run_dir}")
    print(json.dumps({k: v for k, v in report.metrics.items() if k != "timing"}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.run:
        run_dir = Path(args.run)
    else:
        cfg_path = Path(_read_config_path(args))
        if cfg_path.name == "config.json" and (cfg_path.parent / "metrics.json").exists():
            run_dir = cfg_path.parent
        else:
            cfg = ex.load_config(cfg_path, args.set, args.seed)
            if args.method:
                cfg["method"] = args.method
            run_dir = Path(args.out) / ex.config_hash(cfg)
    report = ex.evaluate_run(run_dir)
    print(f"evaluated: {report.run_dir}")
    print(json.dumps({k: v for k, v in report.metrics.items() if k != "timing"}, sort_keys=True))
    return EXIT_OK


def _read_config_path(args):
    if args.config is None:
        raise UsageError("eval needs --run DIR or --config PATH")
    return args.config


# -- gen-data ----------------------------------------------------------------------

def _splits_of(ds):
    return {"train": ds.train.tolist(), "val": ds.val.tolist(), "test": ds.test.tolist()}


def cmd_gen_data(args) -> int:
    cfg = _read_config(args.config, args.set, args.seed)
    cfg.setdefault("method", next(iter(ex.TASKS.get(cfg.get("task"), {"methods": {"": 0}})["methods"])))
    cfg = ex.resolve_config(cfg)
    d, seed, task = cfg["dataset"], cfg["seed"], cfg["task"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    manifest = {"schema_version": ex.SCHEMA_VERSION, "task": task, "seed": seed, "dataset": d}

    def put(name, arr):
        tc.save_tensor(out / f"{name}.mbt", np.asarray(arr, dtype=float))
        files[name] = f"{name}.mbt"

    if task == "lasso":
        ds, p = ex.lasso_data(d, seed)
        put("X", ds.inputs)
        put("S", ds.targets)
        p.save(out / "problem.json")
        files["problem"] = "problem.json"
        manifest["splits"] = _splits_of(ds)
    elif task == "linear-tracking":
        model, ds = ex.tracking_data(d, seed)
        put("X", ds.inputs)
        put("Z", ds.targets)
        put("S", ds.extras["S"])
        manifest["model"] = {"type": "linear", **model.to_dict()}
        manifest["splits"] = _splits_of(ds)
    elif task == "lorenz":
        model, train, test = ex.lorenz_data(d, seed)
        put("X_train", train.inputs)
        put("Z_train", train.targets)
        put("X", test.inputs)
        put("Z", test.targets)
        manifest["model"] = {"type": "lorenz", **{k: d[k] for k in ("q2", "r2", "dt", "J", "truth", "substeps")}}
        manifest["splits"] = _splits_of(train)
    elif task == "lqg":
        model = ex.lqg_model(d)
        trajs = ss.simulate_many(model, d["T"], [(seed, i) for i in range(d["N"])])
        put("X", np.stack([t.x for t in trajs]))
        put("Z", np.stack([t.z for t in trajs]))
        put("S", np.stack([t.s for t in trajs]))
        manifest["model"] = {"type": "linear", **model.to_dict()}
    else:
        sample, H, St, Xt = ex.deep_prior_data(d, seed)
        put("X", Xt)
        put("S", St)
        put("S_train", sample(d["N"], 41))
        sp.SparseProblem(H, rho=0.0, sigma2=d["sigma"] ** 2).save(out / "problem.json")
        files["problem"] = "problem.json"
    manifest["files"] = files
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
    print(f"wrote {', '.join(sorted(files.values()))} and manifest.json to {out}")
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return float(obj)


# -- bench -------------------------------------------------------------------------

def cmd_bench(args) -> int:
    cfg = _read_config(args.config, args.set, args.seed)
    methods = cfg.pop("methods", None)
    if args.method:
        methods = [m.strip() for m in args.method.split(",") if m.strip()]
    if not isinstance(methods, list) or len(set(methods)) < 2:
        raise ex.ConfigError("bench needs a 'methods' list with at least 2 distinct methods")
    per_method = cfg.pop("params", {}) or {}
    if set(per_method) - set(methods):
        raise ex.ConfigError(f"params given for methods not in the bench: {sorted(set(per_method) - set(methods))}")
    cfgs = []
    for m in methods:
        c = {**cfg, "method": m, "params": per_method.get(m, {})}
        ex.resolve_config(c)
        cfgs.append(c)
    workers = min(len(cfgs), _thread_cap())
    with ThreadPoolExecutor(max_workers=workers) as pool:
        reports = list(pool.map(lambda c: ex.run_experiment(c, Path(args.out) / "runs"), cfgs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, summary = [], []
    for m, rep in zip(methods, reports):
        curve = rep.run_dir / "curve.csv"
        if curve.exists():
            with open(curve, newline="") as fh:
                for rec in csv.DictReader(fh):
                    rows.append((m, int(rec["index"]), float(rec["mse"]), float(rec.get("objective", "nan"))))
        met = rep.metrics
        score = met.get("test_mse", met.get("mean_cost"))
        db = met.get("test_mse_db", float(10 * np.log10(score)) if score and score > 0 else float("nan"))
        summary.append((m, score, db, met["timing"]["runtime_s"], str(rep.run_dir)))
    ex.write_csv(out / "bench.csv", ["method", "index", "mse", "objective"], rows)
    metric = "mean_cost" if cfg.get("task") == "lqg" else "test_mse"
    ex.write_csv(out / "summary.csv", ["method", metric, f"{metric}_db", "runtime_s", "run_dir"], summary)
    width = max(len(m) for m in methods)
    print(f"{'method':<{width}}  {metric:>12}  {'dB':>9}  {'runtime_s':>9}")
    for m, score, db, rt, _ in summary:
        print(f"{m:<{width}}  {score:12.6g}  {db:9.3f}  {rt:9.2f}")
    return EXIT_OK


# -- suite -----------------------------------------------------------------------------

def cmd_suite(args) -> int:
    from .acceptance import CRITERIA, run_suite

    if args.list:
        for cid, crit in sorted(CRITERIA.items()):
            print(f"{cid:2d}  {crit.name}")
        return EXIT_OK
    ids = None
    if args.only:
        try:
            ids = [int(v) for v in args.only.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"--only takes comma-separated criterion ids, got {args.only!r}") from None
        unknown = sorted(set(ids) - set(CRITERIA))
        if unknown:
            raise UsageError(f"unknown criterion ids {unknown}; valid: {sorted(CRITERIA)}")
    results = run_suite(ids, quick=args.quick, out_dir=args.out, echo=lambda line: print(line, flush=True))
    failed = [r.id for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed; results in {Path(args.out) / 'results.json'}")
    return EXIT_NUMERICAL if failed else EXIT_OK


# -- entry ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbdl", description="Model-based deep learning lab.")
    sub = parser.add_subparsers(dest="verb", metavar="VERB")
    sub.required = True

    def common(p, out_default):
        p.add_argument("--config", metavar="PATH", help="JSON config file")
        p.add_argument("--out", metavar="DIR", default=out_default, help=f"output directory (default {out_default})")
        p.add_argument("--seed", type=int, metavar="N", help="override the config seed")
        p.add_argument("--set", action="append", default=[], metavar="K=V",
                       help="override a config entry; dotted keys, JSON values; repeatable")
        p.add_argument("--method", help="override the config method (bench: comma-separated list)")
        p.add_argument("--quick", action="store_true", help="reduced budgets (suite)")

    p = sub.add_parser("solve", help="run one solver and write solution tensors plus trace.csv")
    common(p, "out")
    p.set_defaults(func=cmd_solve)
    p = sub.add_parser("train", help="run an experiment config into <out>/<config hash>/")
    common(p, "runs")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", help="re-evaluate a finished run from its saved parameters")
    common(p, "runs")
    p.add_argument("--run", metavar="DIR", help="run directory to evaluate")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("gen-data", help="write synthetic task data as tensor files")
    common(p, "data")
    p.set_defaults(func=cmd_gen_data)
    p = sub.add_parser("bench", help="compare at least two methods of one task")
    common(p, "bench")
    p.set_defaults(func=cmd_bench)
    p = sub.add_parser("suite", help="run the acceptance criteria")
    common(p, "suite")
    p.add_argument("--list", action="store_true", help="print criterion ids and exit")
    p.add_argument("--only", metavar="IDS", help="comma-separated criterion ids to run")
    p.set_defaults(func=cmd_suite)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ArithmeticError, np.linalg.LinAlgError, FloatingPointError) as exc:
        # LinAlgError derives from ValueError, so it is caught before configuration errors.
        print(f"mbdl {args.verb}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ex.ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"mbdl {args.verb}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
