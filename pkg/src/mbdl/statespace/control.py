"""LQR/LQG feedback and receding-horizon MPC for linear-Gaussian models.

The control cost per step is ``z^T Q z + s^T R s``.  Feedback gains depend
only on ``(A, B, Q, R)``; the noise covariances enter through the Kalman
filter that supplies the state estimate (certainty equivalence).
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .filters import FilterState, initial_state, kalman_step

__all__ = [
    "RiccatiDivergence",
    "lqr_gain",
    "stationary_lqr",
    "finite_horizon_lqr",
    "lqg_policy",
    "LQGController",
    "mpc_policy",
    "MPCController",
    "control_cost",
]

MAX_RICCATI_ITER = 10_000


class RiccatiDivergence(ArithmeticError):
    """The control Riccati recursion did not settle (unstabilizable pair)."""


def lqr_gain(A, B, R, P):
    """``K = (R + B^T P B)^{-1} B^T P A`` for cost-to-go matrix ``P``."""
    G = R + B.T @ P @ B
    return np.linalg.solve(G, B.T @ P @ A)


def _riccati(A, B, Q, R, P):
    K = lqr_gain(A, B, R, P)
    Pn = Q + A.T @ P @ (A - B @ K)
    return 0.5 * (Pn + Pn.T), K


def stationary_lqr(model, tol: float = 1e-13, max_iter: int = MAX_RICCATI_ITER):
    """Stationary gain by iterating the backward Riccati map from ``P = Q``.

    Returns ``(K, P)``; raises :class:`RiccatiDivergence` after ``max_iter``
    iterations without convergence.  Results are cached on the model.
    """
    key = ("lqr", tol, max_iter)
    if key in model.cache:
        return model.cache[key]
    A, B, Q, R = (np.asarray(m) for m in (model.A, model.B, model.Q, model.R))
    if model.p == 0:
        return np.zeros((0, model.n)), np.asarray(Q)
    P = Q.copy()
    # Overflow is the expected symptom of divergence; it is reported below.
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(max_iter):
            Pn, K = _riccati(A, B, Q, R, P)
            if not np.all(np.isfinite(Pn)):
                break
            if np.max(np.abs(Pn - P)) <= tol * max(1.0, np.max(np.abs(Pn))):
                K = lqr_gain(A, B, R, Pn)
                model.cache[key] = (K, Pn)
                return K, Pn
            P = Pn
    raise RiccatiDivergence(f"control Riccati recursion did not converge in {max_iter} iterations")


def finite_horizon_lqr(model, horizon: int):
    """Gains ``K_0..K_{horizon-1}`` for terminal cost ``Q``."""
    A, B, Q, R = (np.asarray(m) for m in (model.A, model.B, model.Q, model.R))
    P = Q.copy()
    gains = [None] * horizon
    with np.errstate(over="ignore", invalid="ignore"):
        for t in reversed(range(horizon)):
            P, K = _riccati(A, B, Q, R, P)
            gains[t] = K
            if not np.all(np.isfinite(P)):
                raise RiccatiDivergence("control Riccati recursion overflowed")
    return np.asarray(gains).reshape(horizon, model.p, model.n)


def lqg_policy(model, state: FilterState, horizon: Optional[int] = None) -> np.ndarray:
    """``s_t = -K_t z_hat_t``.

    ``horizon=None`` uses the stationary gain; otherwise ``K_t`` comes from
    the finite-horizon recursion at index ``state.t``.
    """
    if horizon is None:
        K, _ = stationary_lqr(model)
    else:
        key = ("lqr-finite", horizon)
        if key not in model.cache:
            model.cache[key] = finite_horizon_lqr(model, horizon)
        K = model.cache[key][min(state.t, horizon - 1)]
    return -K @ np.asarray(state.z_hat)


class LQGController:
    """Kalman filter plus LQR feedback, usable as a ``simulate`` policy."""

    def __init__(self, model, horizon: Optional[int] = None):
        self.model = model
        self.horizon = horizon
        self.reset()

    def reset(self):
        self.state = initial_state(self.model)
        self.s_prev = np.zeros(self.model.p)

    def __call__(self, t, x):
        if x is not None:
            self.state = kalman_step(self.model, self.state, x, self.s_prev)
        self.s_prev = lqg_policy(self.model, self.state, self.horizon)
        return self.s_prev


def mpc_policy(model, state: FilterState, H: int, forecasts=None, Q_seq=None, R_seq=None) -> np.ndarray:
    """Actions ``s_0..s_{H-1}`` minimizing the forecast-driven quadratic cost.

    The plan starts at ``z_0 = state.z_hat`` and follows
    ``z_{k+1} = A z_k + B s_k + v_k`` with forecast disturbances ``v_k``
    (``forecasts``, shape ``(H, n)``, zero by default).  The cost is
    ``sum_{k<H} z_k^T Q_k z_k + s_k^T R_k s_k``.  Solved exactly by a backward
    Riccati pass with affine terms; returns an ``(H, p)`` array.
    """
    if H < 1:
        raise ValueError("horizon H must be >= 1")
    A, B = np.asarray(model.A), np.asarray(model.B)
    n, p = model.n, model.p
    vhat = np.zeros((H, n)) if forecasts is None else np.asarray(forecasts, dtype=float).reshape(H, n)
    Qs = [np.asarray(model.Q)] * H if Q_seq is None else [np.asarray(Q) for Q in Q_seq]
    Rs = [np.asarray(model.R)] * H if R_seq is None else [np.asarray(R) for R in R_seq]
    if len(Qs) != H or len(Rs) != H:
        raise ValueError("Q_seq and R_seq must have H entries")
    # Cost-to-go z^T P z + 2 r^T z after step k; nothing beyond the horizon.
    P = np.zeros((n, n))
    r = np.zeros(n)
    Ks, ks = [None] * H, [None] * H
    for k in reversed(range(H)):
        G = Rs[k] + B.T @ P @ B
        K = np.linalg.solve(G, B.T @ P @ A)
        kk = np.linalg.solve(G, B.T @ (P @ vhat[k] + r))
        r = A.T @ (P @ (vhat[k] - B @ kk) + r)
        P = Qs[k] + A.T @ P @ (A - B @ K)
        P = 0.5 * (P + P.T)
        Ks[k], ks[k] = K, kk
        if not np.all(np.isfinite(P)):
            raise RiccatiDivergence("MPC Riccati pass overflowed")
    z = np.asarray(state.z_hat, dtype=float)
    actions = np.empty((H, p))
    for k in range(H):
        actions[k] = -Ks[k] @ z - ks[k]
        z = A @ z + B @ actions[k] + vhat[k]
    return actions


class MPCController(LQGController):
    """Receding horizon: plan ``H`` actions, apply the first, replan next step."""

    def __init__(self, model, H: int, forecast_fn=None):
        self.H = H
        self.forecast_fn = forecast_fn
        super().__init__(model)

    def __call__(self, t, x):
        if x is not None:
            self.state = kalman_step(self.model, self.state, x, self.s_prev)
        fc = None if self.forecast_fn is None else self.forecast_fn(t, self.H)
        self.s_prev = mpc_policy(self.model, self.state, self.H, fc)[0]
        return self.s_prev


def control_cost(model, traj) -> float:
    """Average of ``z_t^T Q z_t + s_{t-1}^T R s_{t-1}`` along a trajectory."""
    Q, R = np.asarray(model.Q), np.asarray(model.R)
    zc = np.einsum("ti,ij,tj->t", traj.z, Q, traj.z)
    sc = np.einsum("ti,ij,tj->t", traj.s, R, traj.s) if model.p else 0.0
    return float(np.mean(zc + sc))
