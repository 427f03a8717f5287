"""Kalman filter, its steady state, and the extended Kalman filter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as tc

__all__ = [
    "FilterState",
    "initial_state",
    "kalman_gain",
    "kalman_step",
    "kalman_gains",
    "kalman_filter",
    "steady_state_gain",
    "ekf_step",
    "ekf_filter",
]

PSD_TOL = 1e-10


@dataclass
class FilterState:
    z_hat: np.ndarray
    P: np.ndarray
    t: int = 0


def initial_state(model) -> FilterState:
    return FilterState(np.array(model.z0, dtype=float), np.array(model.P0, dtype=float), 0)


def _sym(P):
    return 0.5 * (P + P.T)


def kalman_gain(C, W, P_pred):
    """Gain ``P- C^T (C P- C^T + W)^{-1}`` for a predicted covariance.

    A singular innovation covariance is tolerated only when ``P- C^T`` is
    zero, in which case the gain is zero; otherwise ``NotSPDError``.
    """
    PCt = P_pred @ C.T
    S = _sym(C @ PCt + W)
    try:
        return tc.SPDFactor(S).solve(PCt.T).T
    except tc.NotSPDError:
        if np.max(np.abs(PCt), initial=0.0) <= PSD_TOL:
            return np.zeros_like(PCt)
        raise


def _update_cov(P_pred, L, C, W):
    # Joseph form keeps P symmetric PSD in floating point.
    I_LC = np.eye(len(P_pred)) - L @ C
    P = I_LC @ P_pred @ I_LC.T + L @ W @ L.T
    if P.size and np.min(np.linalg.eigvalsh(_sym(P))) < -PSD_TOL * max(1.0, np.max(np.abs(P))):
        raise ArithmeticError("filter covariance left the PSD cone")
    return _sym(P)


def kalman_step(model, state: FilterState, x_t, s_prev=None) -> FilterState:
    """Predict with ``(A, B, V)`` and update with ``x_t`` through ``(C, W)``."""
    A, C = np.asarray(model.A), np.asarray(model.C)
    x_t = np.asarray(x_t, dtype=float).reshape(model.q)
    z_pred = A @ state.z_hat
    if model.p:
        s_prev = np.zeros(model.p) if s_prev is None else np.asarray(s_prev, dtype=float).reshape(model.p)
        z_pred = z_pred + np.asarray(model.B) @ s_prev
    P_pred = _sym(A @ state.P @ A.T + model.V)
    L = kalman_gain(C, np.asarray(model.W), P_pred)
    z_hat = z_pred + L @ (x_t - C @ z_pred)
    return FilterState(z_hat, _update_cov(P_pred, L, C, np.asarray(model.W)), state.t + 1)


def kalman_gains(model, T: int, P0=None):
    """Gain sequence ``L_1..L_T`` (shape ``(T, n, q)``) and posterior covariances.

    The gains do not depend on the data, so one sequence serves every
    trajectory that starts from the same covariance.
    """
    A, C, V, W = (np.asarray(m) for m in (model.A, model.C, model.V, model.W))
    P = np.asarray(model.P0 if P0 is None else P0, dtype=float)
    gains = np.empty((T, model.n, model.q))
    covs = np.empty((T, model.n, model.n))
    for t in range(T):
        P_pred = _sym(A @ P @ A.T + V)
        L = kalman_gain(C, W, P_pred)
        P = _update_cov(P_pred, L, C, W)
        gains[t], covs[t] = L, P
    return gains, covs


def kalman_filter(model, X, S=None, gains=None, callback=None):
    """Filtered means for one ``(T, q)`` or a batch ``(N, T, q)`` of observations.

    Starts from ``model.z0``/``model.P0``.  Returns an array shaped like the
    states, ``(T, n)`` or ``(N, T, n)``.  ``callback(t, z)`` sees the
    ``(N, n)`` estimates after every step.
    """
    X = np.asarray(X, dtype=float)
    single = X.ndim == 2
    if single:
        X = X[None]
        S = None if S is None else np.asarray(S)[None]
    N, T, _ = X.shape
    if gains is None:
        gains, _ = kalman_gains(model, T)
    A, B, C = np.asarray(model.A), np.asarray(model.B), np.asarray(model.C)
    z = np.broadcast_to(np.asarray(model.z0, dtype=float), (N, model.n)).copy()
    out = np.empty((N, T, model.n))
    for t in range(T):
        pred = z @ A.T
        if model.p and S is not None:
            pred = pred + S[:, t] @ B.T
        z = pred + (X[:, t] - pred @ C.T) @ gains[t].T
        out[:, t] = z
        if callback is not None:
            callback(t + 1, z)
    return out[0] if single else out


def steady_state_gain(model, tol: float = 1e-14, max_iter: int = 10_000):
    """Iterate the filter Riccati map to its fixed point; returns ``(L, P_pred)``."""
    A, C, V, W = (np.asarray(m) for m in (model.A, model.C, model.V, model.W))
    P = np.asarray(model.P0, dtype=float)
    prev = None
    for _ in range(max_iter):
        P_pred = _sym(A @ P @ A.T + V)
        L = kalman_gain(C, W, P_pred)
        P = _update_cov(P_pred, L, C, W)
        if not np.all(np.isfinite(P)):
            break
        if prev is not None and np.max(np.abs(P_pred - prev)) <= tol * max(1.0, np.max(np.abs(P_pred))):
            return L, P_pred
        prev = P_pred
    raise ArithmeticError(f"filter Riccati iteration did not converge in {max_iter} iterations")


def ekf_step(model, state: FilterState, x_t, s_prev=None) -> FilterState:
    """First-order linearization of :func:`kalman_step` about the current mean."""
    z = np.asarray(state.z_hat, dtype=float)[None]
    s = None if s_prev is None else np.asarray(s_prev, dtype=float)[None]
    F = model.jacobian(z)[0]
    z_pred = np.asarray(model.transition(z, s))[0]
    C, W = np.asarray(model.C), np.asarray(model.W)
    P_pred = _sym(F @ state.P @ F.T + np.asarray(model.V))
    L = kalman_gain(C, W, P_pred)
    z_hat = z_pred + L @ (np.asarray(x_t, dtype=float) - C @ z_pred)
    return FilterState(z_hat, _update_cov(P_pred, L, C, W), state.t + 1)


def ekf_filter(model, X, V=None, W=None, callback=None):
    """Extended Kalman filter over a batch ``(N, T, q)``; returns ``(N, T, n)``.

    All trajectories are advanced together with stacked covariances.  ``V``
    and ``W`` override the model's noise covariances (the filter designer's
    assumed values).  ``callback(t, z)`` as in :func:`kalman_filter`.
    """
    X = np.asarray(X, dtype=float)
    single = X.ndim == 2
    if single:
        X = X[None]
    N, T, q = X.shape
    n = model.n
    C = np.asarray(model.C)
    V = np.asarray(model.V if V is None else V)
    W = np.asarray(model.W if W is None else W)
    z = np.broadcast_to(np.asarray(model.z0, dtype=float), (N, n)).copy()
    P = np.broadcast_to(np.asarray(model.P0, dtype=float), (N, n, n)).copy()
    out = np.empty((N, T, n))
    for t in range(T):
        F = model.jacobian(z)
        z_pred = np.asarray(model.transition(z))
        P_pred = F @ P @ np.swapaxes(F, 1, 2) + V
        P_pred = 0.5 * (P_pred + np.swapaxes(P_pred, 1, 2))
        PCt = P_pred @ C.T
        Sinn = C @ PCt + W
        L = np.swapaxes(np.linalg.solve(Sinn, np.swapaxes(PCt, 1, 2)), 1, 2)
        innov = X[:, t] - z_pred @ C.T
        z = z_pred + np.einsum("bij,bj->bi", L, innov)
        I_LC = np.eye(n) - L @ C
        P = I_LC @ P_pred @ np.swapaxes(I_LC, 1, 2) + L @ W @ np.swapaxes(L, 1, 2)
        P = 0.5 * (P + np.swapaxes(P, 1, 2))
        out[:, t] = z
        if callback is not None:
            callback(t + 1, z)
    return out[0] if single else out
