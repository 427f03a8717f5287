"""Data-driven filters: fitted noise covariances, learned gains, learned features.

All three are trained the same way: run the filter over labeled
trajectories on a tape, score the state estimates with the mean squared
error, and backpropagate through time.  Long trajectories are cut into
windows of ``window`` steps; the filter state crossing a window boundary is
treated as a constant (truncated BPTT) and the window gradients of a batch
are summed into a single SGD step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .. import autograd as ad
from .. import nets
from ..training import Dataset, TrainConfig, fit, make_rng
from .filters import FilterState, kalman_filter, kalman_gains, kalman_step

__all__ = [
    "COV_EPS",
    "fit_covariances",
    "covariance_loss",
    "GainNetwork",
    "feature_scale",
    "kalmannet_step",
    "kalmannet_filter",
    "train_kalmannet",
    "MLPEncoder",
    "learned_feature_kalman",
    "learned_feature_filter",
    "train_feature_encoder",
    "state_mse",
]

COV_EPS = 1e-8


def state_mse(Z_hat, Z) -> float:
    """Mean squared error per state coordinate."""
    return float(np.mean((np.asarray(Z_hat) - np.asarray(Z)) ** 2))


def _windows(T, window):
    window = T if window is None else window
    return [(a, min(a + window, T)) for a in range(0, T, window)]


def _batch(dataset: Dataset, idx, p):
    X, Z = dataset.take(idx)
    S = dataset.extras["S"][idx] if "S" in dataset.extras else np.zeros(Z.shape[:2] + (p,))
    return X, Z, S


# -- fitted noise covariances ---------------------------------------------------

def _chol_param(M):
    M = np.asarray(M, dtype=float)
    return np.linalg.cholesky(M + COV_EPS * np.eye(len(M)))


def _cov_from(L, mask):
    Lm = ad.multiply(L, mask)
    return ad.matmul(Lm, ad.transpose(Lm)) + COV_EPS * np.eye(mask.shape[0])


def _sym(P):
    return ad.scale(P + ad.transpose(P), 0.5)


def covariance_loss(model, params, X, Z, S, window=None, tape_factory=ad.Tape):
    """Filter MSE of ``V = L_V L_V^T + eps I``, ``W = L_W L_W^T + eps I`` and its gradient.

    Returns ``(loss, grads)`` where the loss is the mean over trajectories,
    steps and coordinates.
    """
    N, T, n = Z.shape
    A, B, C = np.asarray(model.A), np.asarray(model.B), np.asarray(model.C)
    mask_v, mask_w = np.tril(np.ones((n, n))), np.tril(np.ones((model.q, model.q)))
    z = np.broadcast_to(np.asarray(model.z0, dtype=float), (N, n)).copy()
    P = np.asarray(model.P0, dtype=float)
    total = 0.0
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    denom = N * T * n
    for a, b in _windows(T, window):
        tape = tape_factory()
        LV, LW = tape.var(params["LV"]), tape.var(params["LW"])
        V, W = _cov_from(LV, mask_v), _cov_from(LW, mask_w)
        zt, Pt = z, P
        loss = None
        for t in range(a, b):
            P_pred = _sym(ad.matmul(ad.matmul(A, Pt), A.T) + V)
            PCt = ad.matmul(P_pred, C.T)
            Sinn = _sym(ad.matmul(C, PCt) + W)
            Lt = ad.spd_solve(Sinn, ad.transpose(PCt))  # (q, n) = L^T
            pred = ad.matmul(zt, A.T)
            if model.p:
                pred = pred + S[:, t] @ B.T
            zt = pred + ad.matmul(X[:, t] - ad.matmul(pred, C.T), Lt)
            I_LC = np.eye(n) - ad.matmul(ad.transpose(Lt), C)
            Pt = ad.matmul(ad.matmul(I_LC, P_pred), ad.transpose(I_LC))
            Pt = _sym(Pt + ad.matmul(ad.matmul(ad.transpose(Lt), W), Lt))
            term = ad.sqnorm(zt - Z[:, t])
            loss = term if loss is None else loss + term
        loss = ad.scale(loss, 1.0 / denom)
        g = ad.backward(tape, loss)
        grads["LV"] += g[LV.id]
        grads["LW"] += g[LW.id]
        total += float(loss.value)
        z, P = np.array(ad.value_of(zt)), np.array(ad.value_of(Pt))
    return total, grads


def fit_covariances(model, dataset: Dataset, config: TrainConfig, V0=None, W0=None, window: Optional[int] = 50):
    """Tune ``V`` and ``W`` of ``model`` by SGD on the filtered-state MSE.

    The other model matrices are taken as known.  Returns ``(V, W, result)``;
    the validation split picks the checkpoint, the initial guess included,
    so the returned pair never validates worse than ``(V0, W0)``.
    """
    V0 = np.asarray(model.V if V0 is None else V0, dtype=float)
    W0 = np.asarray(model.W if W0 is None else W0, dtype=float)
    params = {"LV": _chol_param(V0), "LW": _chol_param(W0)}
    mask_v, mask_w = np.tril(np.ones(V0.shape)), np.tril(np.ones(W0.shape))

    def covs(prm):
        Lv, Lw = prm["LV"] * mask_v, prm["LW"] * mask_w
        return Lv @ Lv.T + COV_EPS * np.eye(len(Lv)), Lw @ Lw.T + COV_EPS * np.eye(len(Lw))

    def objective(prm, idx):
        X, Z, S = _batch(dataset, idx, model.p)
        return covariance_loss(model, prm, X, Z, S, window)

    def validate(prm):
        V, W = covs(prm)
        X, Z, S = _batch(dataset, dataset.val, model.p)
        return state_mse(kalman_filter(model.replace(V=V, W=W), X, S), Z)

    result = fit(params, objective, dataset.train, config, validate=validate)
    V, W = covs(result.params)
    return V, W, result


# -- learned Kalman gain -----------------------------------------------------------

def feature_scale(dataset: Dataset, split="train") -> dict:
    """Per-feature normalizers estimated from training trajectories only."""
    idx = dataset.split(split)
    X, Z = dataset.take(idx)
    scale = {
        "x": X.reshape(-1, X.shape[-1]).std(axis=0),
        "innov": np.diff(X, axis=1).reshape(-1, X.shape[-1]).std(axis=0),
        "z": Z.reshape(-1, Z.shape[-1]).std(axis=0),
    }
    if "S" in dataset.extras and dataset.extras["S"].shape[-1]:
        S = dataset.extras["S"][idx]
        scale["s"] = S.reshape(-1, S.shape[-1]).std(axis=0)
    return {k: np.where(v > 0, v, 1.0) for k, v in scale.items()}


@dataclass
class GainNetwork:
    """Recurrent map from per-step features to an ``n x q`` gain.

    Features are ``[x_t, s_{t-1}, innovation, z_hat_{t-1}]``, each divided by
    a fixed scale.  One tanh recurrent layer of width ``hidden`` feeds an
    affine output layer whose bias starts at ``gain0`` (by default half the
    pseudo-inverse of ``C``), so an untrained network behaves like a
    constant-gain observer.
    """

    params: dict
    n: int
    q: int
    p: int = 0
    scale: dict = field(default_factory=dict)
    hidden: int = 32

    @classmethod
    def create(cls, n, q, p=0, hidden=32, seed=0, C=None, gain0=None, scale=None, out_init=0.1):
        rng = make_rng(seed, 11)
        d = 2 * q + p + n
        if gain0 is None:
            gain0 = 0.5 * np.linalg.pinv(np.asarray(C)) if C is not None else np.zeros((n, q))
        params = {
            "Wi": rng.standard_normal((hidden, d)) / math.sqrt(d),
            "Wh": 0.5 * rng.standard_normal((hidden, hidden)) / math.sqrt(hidden),
            "bh": np.zeros(hidden),
            "Wo": out_init * rng.standard_normal((n * q, hidden)) / math.sqrt(hidden),
            "bo": np.asarray(gain0, dtype=float).reshape(n * q).copy(),
        }
        return cls(params, n, q, p, dict(scale or {}), hidden)

    def initial_hidden(self, batch: int):
        return np.zeros((batch, self.hidden))

    def _scaled(self, key, v):
        s = self.scale.get(key)
        return v if s is None else ad.multiply(v, 1.0 / s)

    def __call__(self, x_t, s_prev, innov, z_prev, hidden, params=None):
        prm = self.params if params is None else params
        parts = [self._scaled("x", x_t)]
        if self.p:
            parts.append(self._scaled("s", s_prev))
        parts += [self._scaled("innov", innov), self._scaled("z", z_prev)]
        feats = ad.concatenate(parts, axis=-1)
        h = ad.tanh(ad.matmul(feats, ad.transpose(prm["Wi"])) + ad.matmul(hidden, ad.transpose(prm["Wh"])) + prm["bh"])
        g = ad.matmul(h, ad.transpose(prm["Wo"])) + prm["bo"]
        batch = ad.value_of(x_t).shape[0]
        return ad.reshape(g, (batch, self.n, self.q)), h

    def with_params(self, params) -> "GainNetwork":
        return GainNetwork(dict(params), self.n, self.q, self.p, self.scale, self.hidden)

    def save(self, directory) -> None:
        meta = {"n": self.n, "q": self.q, "p": self.p, "hidden": self.hidden,
                "scale": {k: np.asarray(v).tolist() for k, v in self.scale.items()}}
        nets.save_weights(directory, self.params, "gain-network", meta)

    @classmethod
    def load(cls, directory) -> "GainNetwork":
        params, man = nets.load_weights(directory)
        if man.get("kind") != "gain-network":
            raise ValueError(f"{directory} holds a {man.get('kind')!r}, not a gain network")
        scale = {k: np.asarray(v) for k, v in man["scale"].items()}
        return cls(params, man["n"], man["q"], man["p"], scale, man["hidden"])


def kalmannet_step(model, net: Callable, z_hat_prev, x_t, s_prev=None, hidden=None, params=None):
    """``z_t = f(z_{t-1}, s_{t-1}) + K_t (x_t - C f(z_{t-1}, s_{t-1}))`` with ``K_t`` from ``net``.

    Works on one state ``(n,)`` or a batch ``(B, n)``.  ``net`` is called as
    ``net(x_t, s_prev, innovation, z_hat_prev, hidden, params)`` and returns
    ``(gain, hidden)``.  Returns ``(z_hat, hidden)``; no covariance is
    propagated.
    """
    single = ad.value_of(z_hat_prev).ndim == 1
    if single:
        z_hat_prev = ad.reshape(z_hat_prev, (1, model.n))
        x_t = np.asarray(x_t, dtype=float).reshape(1, -1)
        s_prev = None if s_prev is None else np.asarray(s_prev, dtype=float).reshape(1, -1)
    B = ad.value_of(z_hat_prev).shape[0]
    if ad.value_of(x_t).shape != (B, model.q):
        raise ad.ShapeError(f"observation batch {ad.value_of(x_t).shape} does not match ({B}, {model.q})")
    if model.p and s_prev is None:
        s_prev = np.zeros((B, model.p))
    if hidden is None:
        hidden = net.initial_hidden(B)
    pred = model.transition(z_hat_prev, s_prev)
    innov = x_t - model.observe(pred)
    gain, hidden = net(x_t, s_prev, innov, z_hat_prev, hidden, params)
    corr = ad.reshape(ad.matmul(gain, ad.reshape(innov, (B, model.q, 1))), (B, model.n))
    z_hat = pred + corr
    if single:
        z_hat = ad.reshape(z_hat, (model.n,))
    return z_hat, hidden


def kalmannet_filter(model, net, X, S=None, callback=None):
    """Run a gain network over ``(N, T, q)`` observations from ``model.z0``.

    ``callback(t, z)`` sees the ``(N, n)`` estimates after every step.
    """
    X = np.asarray(X, dtype=float)
    single = X.ndim == 2
    if single:
        X = X[None]
        S = None if S is None else np.asarray(S)[None]
    N, T, _ = X.shape
    z = np.broadcast_to(np.asarray(model.z0, dtype=float), (N, model.n)).copy()
    h = None
    out = np.empty((N, T, model.n))
    for t in range(T):
        s = None if (S is None or not model.p) else S[:, t]
        z, h = kalmannet_step(model, net, z, X[:, t], s, h)
        out[:, t] = z
        if callback is not None:
            callback(t + 1, z)
    return out[0] if single else out


def _kalmannet_loss(model, net, params, X, Z, S, window):
    N, T, n = Z.shape
    z = np.broadcast_to(np.asarray(model.z0, dtype=float), (N, n)).copy()
    h = net.initial_hidden(N)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    total = 0.0
    denom = N * T * n
    for a, b in _windows(T, window):
        tape = ad.Tape()
        leaves = nets.as_leaves(tape, params)
        zt, ht = z, h
        loss = None
        for t in range(a, b):
            s = S[:, t] if model.p else None
            zt, ht = kalmannet_step(model, net, zt, X[:, t], s, ht, leaves)
            term = ad.sqnorm(zt - Z[:, t])
            loss = term if loss is None else loss + term
        loss = ad.scale(loss, 1.0 / denom)
        g = ad.backward(tape, loss)
        for k, leaf in leaves.items():
            grads[k] += g[leaf.id]
        total += float(loss.value)
        z, h = np.array(ad.value_of(zt)), np.array(ad.value_of(ht))
    return total, grads


def train_kalmannet(net: GainNetwork, model, dataset: Dataset, config: TrainConfig, window: Optional[int] = 50,
                    on_epoch=None):
    """Fit the gain network end to end on the state MSE of its estimates.

    Returns ``(net, result)`` with the best-validation network.
    """

    def objective(prm, idx):
        X, Z, S = _batch(dataset, idx, model.p)
        return _kalmannet_loss(model, net, prm, X, Z, S, window)

    def validate(prm):
        X, Z, S = _batch(dataset, dataset.val, model.p)
        return state_mse(kalmannet_filter(model, net.with_params(prm), X, S), Z)

    result = fit(dict(net.params), objective, dataset.train, config, validate=validate, on_epoch=on_epoch)
    return net.with_params(result.params), result


# -- Kalman filter on learned features ---------------------------------------------

@dataclass
class MLPEncoder:
    """``h(x) = MLP(asinh(x / scale))``, a tanh network from observations to features.

    Observations are data, never tape values, so the fixed ``asinh``
    compression is applied in numpy; it tames heavy-tailed measurements
    while staying monotone and invertible.
    """

    params: dict
    scale: np.ndarray

    @classmethod
    def create(cls, q, width=32, seed=0, scale=None):
        params = nets.init_mlp([q, width, q], make_rng(seed, 13))
        return cls(params, np.ones(q) if scale is None else np.asarray(scale, dtype=float))

    def __call__(self, x, params=None):
        prm = self.params if params is None else params
        u = np.arcsinh(np.asarray(x, dtype=float) / self.scale)
        return nets.mlp_apply(prm, u, act="tanh")

    def with_params(self, params) -> "MLPEncoder":
        return MLPEncoder(dict(params), self.scale)


def learned_feature_kalman(model, encoder: Callable, state: FilterState, x_t, s_prev=None) -> FilterState:
    """One Kalman step on the encoded observation ``encoder(x_t)``."""
    feat = np.asarray(encoder(np.asarray(x_t, dtype=float)[None]))[0]
    return kalman_step(model, state, feat, s_prev)


def learned_feature_filter(model, encoder: Callable, X, S=None, gains=None, params=None):
    """Kalman filter means on encoded observations; dual-mode in ``params``.

    ``X`` is ``(N, T, q)``.  The gains come from ``model`` and do not depend
    on the data.  Returns the estimates and, when ``params`` are tape
    values, the graph stays connected to them.
    """
    X = np.asarray(X, dtype=float)
    N, T, q = X.shape
    if gains is None:
        gains, _ = kalman_gains(model, T)
    A, B, C = np.asarray(model.A), np.asarray(model.B), np.asarray(model.C)
    enc = (lambda v: encoder(v, params)) if params is not None else encoder
    z = np.broadcast_to(np.asarray(model.z0, dtype=float), (N, model.n)).copy()
    out = []
    for t in range(T):
        f_t = enc(X[:, t])
        pred = ad.matmul(z, A.T)
        if model.p and S is not None:
            pred = pred + np.asarray(S)[:, t] @ B.T
        z = pred + ad.matmul(f_t - ad.matmul(pred, C.T), gains[t].T)
        out.append(z)
    return out


def train_feature_encoder(encoder: MLPEncoder, model, dataset: Dataset, config: TrainConfig):
    """Train the encoder end to end through a Kalman filter built from ``model``.

    Returns ``(encoder, result)`` with the best-validation weights.
    """
    T = dataset.targets.shape[1]
    gains, _ = kalman_gains(model, T)
    n = model.n

    def objective(prm, idx):
        X, Z, S = _batch(dataset, idx, model.p)
        tape = ad.Tape()
        leaves = nets.as_leaves(tape, prm)
        est = learned_feature_filter(model, encoder, X, S, gains, leaves)
        loss = None
        for t, z in enumerate(est):
            term = ad.sqnorm(z - Z[:, t])
            loss = term if loss is None else loss + term
        loss = ad.scale(loss, 1.0 / (len(idx) * T * n))
        g = ad.backward(tape, loss)
        return float(loss.value), {k: g[v.id] for k, v in leaves.items()}

    def validate(prm):
        X, Z, S = _batch(dataset, dataset.val, model.p)
        est = learned_feature_filter(model, encoder.with_params(prm), X, S, gains)
        return state_mse(np.stack(est, axis=1), Z)

    result = fit(dict(encoder.params), objective, dataset.train, config, validate=validate)
    return encoder.with_params(result.params), result
