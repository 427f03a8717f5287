"""Deep unfolding of ISTA and ADMM, and learned tuning of ADMM hyperparameters.

A network with ``K`` layers runs ``K`` iterations of the parent solver with
per-layer parameters.  Initialized at the solver's own matrices the forward
pass reproduces the solver; training then moves the parameters away from it.

Two ADMM variants are supported:

``mode="full"``
    ``s = W1_k x + W2_k (v - u)`` with trainable ``W1_k, W2_k, lam_k, mu_k``.
``mode="hyper"``
    only ``lam_k, mu_k`` are trained and the first step stays the exact ADMM
    solve with ``(G^T G + 2 lam_k I)``.

Positivity of ``lam_k`` and ``mu_k`` is kept by training their softplus
pre-images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autograd as ad
from . import tensor as tc
from .sparse import AdmmHyper, L1Prior, SparseProblem, default_step
from .training import Dataset, FitResult, TrainConfig, fit

__all__ = [
    "UnfoldedParams",
    "lista_init",
    "lista_forward",
    "admm_init",
    "unfolded_admm_forward",
    "train_unfolded",
    "learned_admm_tune",
    "layer_outputs",
    "save_params",
    "load_params",
]


@dataclass
class UnfoldedParams:
    """Per-layer parameters of an unfolded solver.

    Arrays are stacked over layers; with ``tie_layers`` the stack has a
    single entry shared by all ``K`` layers.  ``W1``/``W2`` are ``None`` in
    ADMM ``hyper`` mode, where ``G`` (the effective measurement operator)
    defines the first step instead.
    """

    kind: str
    K: int
    lam: np.ndarray
    mu: np.ndarray
    W1: Optional[np.ndarray] = None
    W2: Optional[np.ndarray] = None
    tie_layers: bool = False
    mode: str = "full"
    rho: float = 0.0
    G: Optional[np.ndarray] = None
    Psi: Optional[np.ndarray] = None
    history: Optional[FitResult] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("lista", "admm"):
            raise ValueError(f"kind must be 'lista' or 'admm', got {self.kind!r}")
        if self.mode not in ("full", "hyper") or (self.kind == "lista" and self.mode != "full"):
            raise ValueError(f"invalid mode {self.mode!r} for {self.kind}")
        self.lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        L = self.n_stored
        if self.lam.shape != (L,) or self.mu.shape != (L,):
            raise tc.ShapeError(f"expected {L} lam/mu values, got {self.lam.shape}, {self.mu.shape}")
        if np.any(self.lam < 0):
            raise ValueError("lam_k must be non-negative")
        if self.mode == "full":
            if self.W1 is None or self.W2 is None:
                raise ValueError("full mode needs W1 and W2")
            if self.W1.shape[0] != L or self.W2.shape[0] != L:
                raise tc.ShapeError("W1/W2 layer stacks do not match the layer count")
            n, m = self.W1.shape[1:]
            if self.W2.shape[1:] != (n, n):
                raise tc.ShapeError(f"W2 must be {n}x{n} per layer, got {self.W2.shape[1:]}")
        elif self.G is None:
            raise ValueError("hyper mode needs the operator G")

    @property
    def n_stored(self) -> int:
        return 1 if self.tie_layers else self.K

    def layer(self, k: int) -> int:
        return 0 if self.tie_layers else k

    @property
    def dims(self):
        """``(m, n)``: measurement and signal sizes."""
        if self.W1 is not None:
            return self.W1.shape[2], self.W1.shape[1]
        return self.G.shape

    # Flat dict form used by the optimizer: raw (pre-softplus) scalars.

    def trainable(self, weights: bool = True) -> dict:
        out = {}
        for i in range(self.n_stored):
            out[f"lam_{i}"] = ad.softplus_inv(self.lam[i])
            out[f"mu_{i}"] = ad.softplus_inv(self.mu[i])
            if weights and self.mode == "full":
                out[f"W1_{i}"] = np.array(self.W1[i])
                out[f"W2_{i}"] = np.array(self.W2[i])
        return out

    def with_trainable(self, flat: dict) -> "UnfoldedParams":
        L = self.n_stored
        lam = np.array([np.logaddexp(0.0, flat[f"lam_{i}"]) for i in range(L)])
        mu = np.array([np.logaddexp(0.0, flat[f"mu_{i}"]) for i in range(L)])
        W1, W2 = self.W1, self.W2
        if "W1_0" in flat:
            W1 = np.stack([flat[f"W1_{i}"] for i in range(L)])
            W2 = np.stack([flat[f"W2_{i}"] for i in range(L)])
        return UnfoldedParams(
            self.kind, self.K, lam, mu, W1, W2, self.tie_layers, self.mode, self.rho, self.G, self.Psi
        )


def _layers_from(params: UnfoldedParams, tape: Optional[ad.Tape] = None, flat: Optional[dict] = None):
    """Per-stored-layer parameter values, as tape leaves when ``tape`` is given."""
    layers = []
    leaves = {}
    for i in range(params.n_stored):
        entry = {}
        for name in ("lam", "mu"):
            if flat is not None and tape is not None and f"{name}_{i}" in flat:
                leaf = tape.var(flat[f"{name}_{i}"])
                leaves[f"{name}_{i}"] = leaf
                entry[name] = ad.softplus(leaf)
            else:
                entry[name] = getattr(params, name)[i]
        for name in ("W1", "W2"):
            if params.mode != "full":
                continue
            if flat is not None and tape is not None and f"{name}_{i}" in flat:
                leaf = tape.var(flat[f"{name}_{i}"])
                leaves[f"{name}_{i}"] = leaf
                entry[name] = leaf
            else:
                entry[name] = getattr(params, name)[i]
        layers.append(entry)
    return layers, leaves


def lista_init(p: SparseProblem, mu: Optional[float] = None, K: int = 10, tie_layers: bool = False) -> UnfoldedParams:
    """Parameters whose forward pass equals ``K`` ISTA iterations with step ``mu``."""
    mu = default_step(p) if mu is None else mu
    G = p.operator
    n = G.shape[1]
    L = 1 if tie_layers else K
    W1 = np.repeat((mu * G.T)[None], L, axis=0)
    W2 = np.repeat((np.eye(n) - mu * G.T @ G)[None], L, axis=0)
    return UnfoldedParams(
        "lista", K, np.full(L, mu * p.rho), np.ones(L), W1, W2, tie_layers,
        rho=p.rho, Psi=p.Psi,
    )


def _lista_apply(layers, params, x, collect=None):
    m, n = params.dims
    s = np.zeros(np.shape(ad.value_of(x))[:-1] + (n,))
    for k in range(params.K):
        lay = layers[params.layer(k)]
        pre = ad.matmul(x, ad.transpose(lay["W1"]))
        if k:
            pre = pre + ad.scale(ad.matmul(s, ad.transpose(lay["W2"])), lay["mu"])
        s = ad.soft_threshold(pre, lay["lam"])
        if collect is not None:
            collect.append(s)
    return s


def _output(params, s):
    return s if params.Psi is None else ad.matmul(s, params.Psi.T)


def lista_forward(params: UnfoldedParams, x) -> np.ndarray:
    """``s_{k+1} = T_{lam_k}(W1_k x + mu_k W2_k s_k)`` from ``s_0 = 0``."""
    x = np.asarray(x, dtype=float)
    m, _ = params.dims
    if x.shape[-1] != m:
        raise tc.ShapeError(f"input trailing size {x.shape[-1]} != {m}")
    layers, _ = _layers_from(params)
    return _output(params, _lista_apply(layers, params, x))


def admm_init(
    p: SparseProblem,
    hyper: Optional[AdmmHyper] = None,
    K: int = 10,
    tie_layers: bool = False,
    mode: str = "full",
) -> UnfoldedParams:
    """Parameters reproducing ``K`` exact ADMM iterations from ``u = v = 0``."""
    hyper = hyper or AdmmHyper()
    G = p.operator
    n = G.shape[1]
    L = 1 if tie_layers else K
    W1 = W2 = None
    if mode == "full":
        factor = tc.SPDFactor(G.T @ G + 2.0 * hyper.lam * np.eye(n))
        W1 = np.repeat(factor.solve(G.T)[None], L, axis=0)
        W2 = np.repeat((2.0 * hyper.lam * factor.solve(np.eye(n)))[None], L, axis=0)
    return UnfoldedParams(
        "admm", K, np.full(L, hyper.lam), np.full(L, hyper.mu), W1, W2, tie_layers, mode,
        rho=p.rho, G=np.array(G), Psi=p.Psi,
    )


def _admm_apply(layers, params, x, prior, collect=None):
    m, n = params.dims
    shape = np.shape(ad.value_of(x))[:-1] + (n,)
    u = np.zeros(shape)
    v = np.zeros(shape)
    s = v
    if params.mode == "hyper":
        G = params.G
        gram = G.T @ G
        gtx = ad.matmul(x, G)
        eye = np.eye(n)
    for k in range(params.K):
        lay = layers[params.layer(k)]
        lam2 = ad.scale(lay["lam"], 2.0)
        if params.mode == "full":
            s = ad.matmul(x, ad.transpose(lay["W1"])) + ad.matmul(v - u, ad.transpose(lay["W2"]))
        else:
            system = ad.add(gram, ad.scale(eye, lam2))
            rhs = gtx + ad.scale(v - u, lam2)
            if len(shape) == 1:
                s = ad.spd_solve(system, rhs)
            else:
                s = ad.transpose(ad.spd_solve(system, ad.transpose(rhs)))
        v_new = prior.prox(s + u, ad.reciprocal(lam2))
        u = u + ad.scale(s - v_new, lay["mu"])
        v = v_new
        if collect is not None:
            collect.append(s)
    return s


def unfolded_admm_forward(params: UnfoldedParams, x, prior=None) -> np.ndarray:
    """Run the ``K`` unfolded ADMM layers and return ``s_K``."""
    x = np.asarray(x, dtype=float)
    m, _ = params.dims
    if x.shape[-1] != m:
        raise tc.ShapeError(f"input trailing size {x.shape[-1]} != {m}")
    prior = prior or L1Prior(params.rho)
    layers, _ = _layers_from(params)
    return _output(params, _admm_apply(layers, params, x, prior))


class _Hooked(list):
    # The forward passes collect layer outputs with append; this reports each one as it lands.
    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def append(self, s):
        super().append(s)
        self.fn(len(self), np.asarray(s))


def layer_outputs(params: UnfoldedParams, x, prior=None, callback=None) -> list:
    """Output of every layer ``k = 1..K`` (signal domain), for per-layer curves.

    ``callback(k, r_k)`` receives the coefficient iterate of layer ``k`` as
    soon as it has been computed.
    """
    x = np.asarray(x, dtype=float)
    layers, _ = _layers_from(params)
    out = [] if callback is None else _Hooked(callback)
    if params.kind == "lista":
        _lista_apply(layers, params, x, out)
    else:
        _admm_apply(layers, params, x, prior or L1Prior(params.rho), out)
    return [np.asarray(_output(params, s)) for s in out]


def _forward_any(params, layers, x, prior):
    if params.kind == "lista":
        return _output(params, _lista_apply(layers, params, x))
    return _output(params, _admm_apply(layers, params, x, prior or L1Prior(params.rho)))


def batch_loss(params: UnfoldedParams, flat: dict, x, s_true, prior=None):
    """Mean squared l2 error on a batch and its gradient w.r.t. ``flat``."""
    tape = ad.Tape()
    layers, leaves = _layers_from(params, tape, flat)
    pred = _forward_any(params, layers, tape.const(x), prior)
    loss = ad.scale(ad.sqnorm(pred - s_true), 1.0 / len(x))
    grads = ad.backward(tape, loss)
    return float(loss.value), {name: grads[leaf.id] for name, leaf in leaves.items()}


def train_unfolded(
    params: UnfoldedParams,
    dataset: Dataset,
    config: Optional[TrainConfig] = None,
    loss: str = "l2",
    train_weights: bool = True,
    prior=None,
) -> UnfoldedParams:
    """Fit the unfolded network to ``(x_i, s_i)`` pairs by mini-batch SGD.

    Minimizes the mean of ``||f(x_i) - s_i||^2`` over the train split.  The
    returned parameters are the best validation checkpoint (the initial ones
    included), so their validation loss never exceeds the starting value.
    The fit history is attached as ``.history``.
    """
    if loss != "l2":
        raise ValueError("unfolded networks train on the l2 loss only")
    config = config or TrainConfig()
    flat0 = params.trainable(weights=train_weights)
    val_idx = dataset.val if len(dataset.val) else dataset.train

    def objective(flat, batch):
        x, s = dataset.take(batch)
        return batch_loss(params, flat, x, s, prior)

    def validate(flat):
        x, s = dataset.take(val_idx)
        pred = _forward_any(params.with_trainable(flat), _layers_from(params.with_trainable(flat))[0], x, prior)
        return float(np.mean(np.sum((pred - s) ** 2, axis=-1)))

    result = fit(flat0, objective, dataset.train, config, validate=validate)
    out = params.with_trainable(result.params)
    out.history = result
    return out


def learned_admm_tune(
    p: SparseProblem,
    hyper0: AdmmHyper,
    dataset: Dataset,
    config: Optional[TrainConfig] = None,
    budget: int = 100,
    return_params: bool = False,
):
    """Tune a single ``[lam, mu]`` pair of ADMM by backpropagating through a
    fixed ``budget`` of iterations.

    Returns the tuned :class:`AdmmHyper`; with ``return_params`` also the
    trained tied network (its ``.history`` holds the loss traces).
    """
    net = admm_init(p, hyper0, K=budget, tie_layers=True, mode="hyper")
    trained = train_unfolded(net, dataset, config)
    tuned = AdmmHyper(float(trained.lam[0]), float(trained.mu[0]), hyper0.max_iter, hyper0.tol)
    return (tuned, trained) if return_params else tuned


def save_params(params: UnfoldedParams, directory, kind_tag: Optional[str] = None) -> None:
    """Directory of tensor files plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name in ("W1", "W2", "G", "Psi"):
        arr = getattr(params, name)
        if arr is not None:
            tc.save_tensor(directory / f"{name}.mbt", arr)
            tensors[name] = f"{name}.mbt"
    manifest = {
        "kind": kind_tag or params.kind,
        "solver": params.kind,
        "mode": params.mode,
        "K": params.K,
        "tied": params.tie_layers,
        "lambda": [float(v) for v in params.lam],
        "mu": [float(v) for v in params.mu],
        "rho": params.rho,
        "tensors": tensors,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_params(directory) -> UnfoldedParams:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    arrays = {name: tc.load_tensor(directory / fname) for name, fname in manifest["tensors"].items()}
    return UnfoldedParams(
        manifest.get("solver", manifest["kind"]),
        manifest["K"],
        np.array(manifest["lambda"]),
        np.array(manifest["mu"]),
        arrays.get("W1"),
        arrays.get("W2"),
        manifest["tied"],
        manifest["mode"],
        manifest["rho"],
        arrays.get("G"),
        arrays.get("Psi"),
    )
