"""DNN-aided recovery: plug-and-play ADMM and inversion of generative priors."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autograd as ad
from . import nets
from . import tensor as tc
from .sparse import AdmmHyper, NumericalError, SparseProblem, admm_iterations
from .training import TrainConfig, fit, make_rng

__all__ = [
    "Denoiser",
    "shrinkage_denoiser",
    "mlp_denoiser",
    "train_denoiser",
    "pnp_admm",
    "alpha_schedule",
    "Generator",
    "deep_prior_objective",
    "deep_prior_invert",
    "train_autoencoder",
    "psnr",
]

log = logging.getLogger(__name__)

DENOISER_KINDS = ("shrinkage", "learned-mlp", "external")
ALPHA_FLOOR = 1e-3


@dataclass
class Denoiser:
    """``denoise(v, alpha)`` with a kind tag; learned kinds carry weights."""

    fn: Callable
    kind: str = "external"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DENOISER_KINDS:
            raise ValueError(f"denoiser kind must be one of {DENOISER_KINDS}, got {self.kind!r}")

    def __call__(self, v, alpha):
        v = np.asarray(v, dtype=float)
        out = np.asarray(self.fn(v, alpha))
        if out.shape != v.shape:
            raise tc.ShapeError(f"denoiser changed shape {v.shape} -> {out.shape}")
        return out

    def save(self, directory) -> None:
        if self.kind != "learned-mlp":
            raise ValueError("only learned denoisers have weights to save")
        nets.save_weights(directory, self.params, "denoiser-mlp")

    @classmethod
    def load(cls, directory) -> "Denoiser":
        params, man = nets.load_weights(directory)
        if man.get("kind") != "denoiser-mlp":
            raise ValueError(f"{directory} holds a {man.get('kind')!r}, not a denoiser")
        return mlp_denoiser(params)


def shrinkage_denoiser() -> Denoiser:
    """Soft thresholding at level ``alpha``, the prox of ``alpha ||.||_1``."""
    return Denoiser(lambda v, alpha: tc.soft_threshold(v, alpha), "shrinkage")


def _mlp_denoise(params, v, alpha):
    # Coordinate-wise gate: every entry goes through the same small network,
    # fed with the entry in noise units and the noise level, and is scaled
    # by a factor in (0, 1), the shape of a posterior-mean shrinker.
    v_val = ad.value_of(v)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), v_val.shape[:-1] + (1,))
    a_eff = np.maximum(alpha, ALPHA_FLOOR)
    rows = v_val.size
    u = ad.reshape(ad.multiply(v, 1.0 / a_eff), (rows, 1))
    a_col = np.broadcast_to(alpha, v_val.shape).reshape(rows, 1)
    feats = ad.concatenate([u, a_col], axis=1)
    gate = ad.sigmoid(ad.reshape(nets.mlp_apply(params, feats, act="relu"), v_val.shape))
    return ad.multiply(v, gate)


def mlp_denoiser(params) -> Denoiser:
    """Denoiser ``v * sigmoid(r(v / alpha, alpha))`` with ``r`` a 2-hidden-layer relu net."""
    params = dict(params)
    return Denoiser(lambda v, alpha: _mlp_denoise(params, v, alpha), "learned-mlp", params)


def psnr(clean, estimate) -> float:
    clean = np.asarray(clean)
    mse = float(np.mean((np.asarray(estimate) - clean) ** 2))
    return 10.0 * math.log10(float(np.max(np.abs(clean))) ** 2 / mse)


def train_denoiser(clean, config: TrainConfig, alpha_range=(0.01, 0.5), width: int = 128,
                   split=(0.8, 0.2), init: Optional[dict] = None):
    """Fit a coordinate-wise MLP denoiser on synthetically corrupted clean signals.

    ``clean`` is an ``(N, n)`` array.  Each sample in a batch gets a noise
    level drawn uniformly from ``alpha_range`` and white Gaussian noise of
    that standard deviation.  The loss is the squared error divided by the
    noise variance.  Returns ``(denoiser, result)``.
    """
    clean = np.asarray(clean, dtype=float)
    N = len(clean)
    perm = make_rng(config.seed, 20).permutation(N)
    n_train = int(round(split[0] * N))
    train_idx, val_idx = perm[:n_train], perm[n_train:]
    lo, hi = alpha_range
    params = init if init is not None else nets.init_mlp([2, width, width, 1], make_rng(config.seed, 21))
    counter = itertools.count()

    def corrupt(rng, s):
        alpha = rng.uniform(lo, hi, size=(len(s), 1))
        return s + alpha * rng.standard_normal(s.shape), alpha

    vrng = make_rng(config.seed, 22)
    v_val, a_val = corrupt(vrng, clean[val_idx])

    def objective(prm, idx):
        rng = make_rng(config.seed, 23, next(counter))
        s = clean[idx]
        v, alpha = corrupt(rng, s)
        tape = ad.Tape()
        leaves = nets.as_leaves(tape, prm)
        out = _mlp_denoise(leaves, v, alpha)
        # Error in noise units, so every noise level weighs the same.
        loss = ad.scale(ad.sqnorm(ad.multiply(out - s, 1.0 / alpha)), 1.0 / s.size)
        g = ad.backward(tape, loss)
        return float(loss.value), {k: g[leaf.id] for k, leaf in leaves.items()}

    def validate(prm):
        out = _mlp_denoise(prm, v_val, a_val)
        return float(np.mean(((out - clean[val_idx]) / a_val) ** 2))

    result = fit(params, objective, train_idx, config, validate=validate if len(val_idx) else None)
    return mlp_denoiser(result.params), result


def alpha_schedule(alpha0: float, kind: str = "constant", decay: float = 0.97) -> Callable:
    """``alpha_k`` for iteration ``k >= 1``: constant, or ``alpha0 * decay^k``."""
    if kind == "constant":
        return lambda k: alpha0
    if kind == "decay":
        return lambda k: alpha0 * decay ** k
    raise ValueError(f"alpha schedule must be 'constant' or 'decay', got {kind!r}")


def pnp_admm(p: SparseProblem, x, hyper: Optional[AdmmHyper] = None, denoiser: Optional[Denoiser] = None,
             alpha=None, schedule: str = "constant", decay: float = 0.97, seed=None, callback=None,
             return_info: bool = False):
    """ADMM with the proximal step replaced by ``denoiser(s + u, alpha_k)``.

    ``p.rho`` only sets the default ``alpha = rho / (2 lam)``, the level at
    which the shrinkage denoiser coincides with the l1 prox.  Denoiser
    weights are never updated here.  Plug-and-play iterations need not
    converge; if ``max_iter`` is reached the final residual is logged and
    reported in ``info`` (``return_info=True`` returns ``(s, info)``).
    """
    hyper = hyper or AdmmHyper()
    denoiser = denoiser or shrinkage_denoiser()
    alpha0 = p.rho / (2.0 * hyper.lam) if alpha is None else float(alpha)
    sched = alpha_schedule(alpha0, schedule, decay)
    s, info = admm_iterations(p, x, hyper, lambda w, k: denoiser(w, sched(k)), seed, callback)
    if not info["converged"]:
        log.warning("pnp_admm stopped after %d iterations with residual %.3e", info["iterations"], info["residual"])
    s = p.synthesize(s)
    return (s, info) if return_info else s


# -- generative priors -----------------------------------------------------------

@dataclass
class Generator:
    """Fixed map from latent codes ``(d,)`` or ``(B, d)`` to signals; dual-mode in ``z``.

    ``kind`` is ``linear`` (``s = G z``) or ``decoder`` (an MLP with tanh
    hidden units).
    """

    kind: str
    params: dict
    d: int
    n: int

    @classmethod
    def linear(cls, G) -> "Generator":
        G = tc.tensor(np.atleast_2d(G))
        return cls("linear", {"G": G}, G.shape[1], G.shape[0])

    @classmethod
    def decoder(cls, params) -> "Generator":
        last = nets.n_layers(params) - 1
        return cls("decoder", dict(params), params["W0"].shape[1], params[f"W{last}"].shape[0])

    def __call__(self, z):
        if self.kind == "linear":
            return ad.matmul(z, self.params["G"].T)
        return nets.mlp_apply(self.params, z, act="tanh")

    def save(self, directory) -> None:
        nets.save_weights(directory, self.params, f"generator-{self.kind}")

    @classmethod
    def load(cls, directory) -> "Generator":
        params, man = nets.load_weights(directory)
        kind = man.get("kind", "")
        if kind == "generator-linear":
            return cls.linear(params["G"])
        if kind == "generator-decoder":
            return cls.decoder(params)
        raise ValueError(f"{directory} holds a {kind!r}, not a generator")


def deep_prior_objective(gen: Generator, H, x, lam, z):
    """``1/2 ||x - H G(z)||^2 + lam ||z||^2``; dual-mode in ``z``."""
    r = x - ad.matmul(gen(z), np.asarray(H).T)
    return ad.scale(ad.sqnorm(r), 0.5) + ad.scale(ad.sqnorm(z), lam)


def _value_and_grad(gen, H, x, lam, z):
    tape = ad.Tape()
    zv = tape.var(z)
    f = deep_prior_objective(gen, H, x, lam, zv)
    return float(f.value), ad.backward(tape, f)[zv.id]


def _descend(gen, H, x, lam, z, steps, lr, c, gtol, callback=None):
    f, g = _value_and_grad(gen, H, x, lam, z)
    trace = [f]
    eta = lr
    for _ in range(steps):
        gg = float(np.sum(g * g))
        if gg <= gtol ** 2:
            break
        # Armijo backtracking by halving, starting from twice the last accepted step.
        eta = min(2.0 * eta, lr) if len(trace) > 1 else lr
        while True:
            z_new = z - eta * g
            f_new = float(deep_prior_objective(gen, H, x, lam, z_new))
            if not math.isfinite(f_new) and eta > 0:
                eta *= 0.5
            elif f_new <= f - c * eta * gg:
                break
            else:
                eta *= 0.5
            if eta < 1e-20:
                return z, trace
        z = z_new
        f, g = _value_and_grad(gen, H, x, lam, z)
        if not math.isfinite(f):
            raise NumericalError("deep-prior objective became non-finite")
        trace.append(f)
        if callback is not None:
            callback(len(trace) - 1, z, f)
    return z, trace


def deep_prior_invert(gen: Generator, H, x, lam: float, steps: int = 500, lr: float = 1.0, restarts: int = 0,
                      seed: int = 0, c: float = 1e-4, gtol: float = 1e-12, callback=None):
    """Minimize ``1/2 ||x - H G(z)||^2 + lam ||z||^2`` over the latent code.

    Gradient descent from ``z = 0`` with an Armijo line search (sufficient
    decrease ``c``, step halving, initial step ``lr``), so the objective
    trace never increases.  ``restarts`` extra runs start from seeded
    standard normal codes; the lowest final objective wins.  Returns
    ``(z_hat, s_hat, trace)`` where ``trace`` belongs to the winning run.
    ``callback(k, z, f)`` follows every accepted step of every run.
    """
    x = np.asarray(x, dtype=float)
    H = np.asarray(H, dtype=float)
    if H.shape != (x.shape[-1], gen.n):
        raise tc.ShapeError(f"H is {H.shape}, expected ({x.shape[-1]}, {gen.n})")
    starts = [np.zeros(gen.d)]
    rng = make_rng(seed, 30)
    starts += [rng.standard_normal(gen.d) for _ in range(restarts)]
    best = None
    for z0 in starts:
        z, trace = _descend(gen, H, x, lam, z0, steps, lr, c, gtol, callback)
        if best is None or trace[-1] < best[1][-1]:
            best = (z, trace)
    z, trace = best
    return z, np.asarray(gen(z)), trace


def train_autoencoder(signals, d: int, config: TrainConfig, width: int = 64, split=(0.8, 0.2)):
    """Fit an encoder/decoder pair by reconstruction; returns ``(generator, result)``.

    The decoder (``d -> width -> n``, tanh hidden layer) becomes the
    generator.
    """
    signals = np.asarray(signals, dtype=float)
    N, n = signals.shape
    rng = make_rng(config.seed, 31)
    params = nets.init_mlp([n, width, d], rng, prefix="enc")
    params.update(nets.init_mlp([d, width, n], rng, prefix="dec"))
    perm = make_rng(config.seed, 32).permutation(N)
    n_train = int(round(split[0] * N))
    train_idx, val_idx = perm[:n_train], perm[n_train:]

    def recon(prm, s):
        code = nets.mlp_apply(prm, s, act="tanh", prefix="enc")
        return nets.mlp_apply(prm, code, act="tanh", prefix="dec")

    def objective(prm, idx):
        tape = ad.Tape()
        leaves = nets.as_leaves(tape, prm)
        s = signals[idx]
        loss = ad.scale(ad.sqnorm(recon(leaves, s) - s), 1.0 / s.size)
        g = ad.backward(tape, loss)
        return float(loss.value), {k: g[leaf.id] for k, leaf in leaves.items()}

    def validate(prm):
        return float(np.mean((recon(prm, signals[val_idx]) - signals[val_idx]) ** 2))

    result = fit(params, objective, train_idx, config, validate=validate if len(val_idx) else None)
    dec = {k[3:]: v for k, v in result.params.items() if k.startswith("dec")}
    return Generator.decoder(dec), result
