"""State-space models and trajectory simulation.

Time indexing used throughout the package: a run starts from the known state
``z_0``; for ``t = 1..T``::

    z_t = f(z_{t-1}, s_{t-1}) + v_{t-1}
    x_t = g(C z_t + w_t)

where ``g`` is the identity unless an observation transform is given.  A
trajectory stores ``z[t-1] = z_t``, ``x[t-1] = x_t`` and ``s[t-1] = s_{t-1}``,
so row ``i`` of ``s`` is the action that preceded row ``i`` of ``z`` and ``x``.

Transition and observation maps take batches of row vectors and are
dual-mode (they also run on tape values), which lets the learned filters
differentiate through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .. import autograd as ad
from .. import tensor as tc
from ..training import make_rng

__all__ = [
    "StateSpaceModel",
    "LorenzSystem",
    "lorenz_model",
    "Trajectory",
    "simulate",
    "simulate_many",
    "cubic_observation",
]

EIG_TOL = 1e-10


def _sym_check(name, M, strict):
    M = np.asarray(M, dtype=np.float64)
    if M.size == 0:
        return
    scale = max(1.0, float(np.max(np.abs(M))))
    if np.max(np.abs(M - M.T)) > 1e-10 * scale:
        raise ValueError(f"{name} must be symmetric")
    lo = float(np.min(np.linalg.eigvalsh(M)))
    if strict and lo <= EIG_TOL:
        raise ValueError(f"{name} must be positive definite (min eigenvalue {lo:.3e})")
    if lo < -EIG_TOL * scale:
        raise ValueError(f"{name} must be positive semidefinite (min eigenvalue {lo:.3e})")


def _psd_sqrt(M):
    """Symmetric square root of a PSD matrix (works for singular ``M``)."""
    if M.size == 0:
        return M
    w, U = np.linalg.eigh(M)
    return (U * np.sqrt(np.clip(w, 0.0, None))) @ U.T


@dataclass
class StateSpaceModel:
    """Linear-Gaussian model ``(A, B, C, Q, R, V, W)`` with known start ``z0``.

    ``B`` defaults to an ``n x 0`` matrix (no control), ``Q`` to zero, ``R``
    to the identity, ``V`` to zero and ``W`` to the identity.  ``W`` must be
    positive definite unless ``allow_singular_W`` is set, which admits the
    noiseless observer used in limit-case tests.
    """

    A: np.ndarray
    C: np.ndarray
    B: Optional[np.ndarray] = None
    Q: Optional[np.ndarray] = None
    R: Optional[np.ndarray] = None
    V: Optional[np.ndarray] = None
    W: Optional[np.ndarray] = None
    z0: Optional[np.ndarray] = None
    P0: Optional[np.ndarray] = None
    allow_singular_W: bool = False
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.A = tc.tensor(np.atleast_2d(self.A))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise tc.ShapeError(f"A must be square, got {self.A.shape}")
        self.C = tc.tensor(np.atleast_2d(self.C))
        if self.C.shape[1] != n:
            raise tc.ShapeError(f"C must have {n} columns, got {self.C.shape}")
        q = self.C.shape[0]
        self.B = tc.tensor(np.zeros((n, 0)) if self.B is None else np.asarray(self.B).reshape(n, -1))
        p = self.B.shape[1]
        self.Q = tc.tensor(np.zeros((n, n)) if self.Q is None else np.atleast_2d(self.Q))
        self.R = tc.tensor(np.eye(p) if self.R is None else np.asarray(self.R).reshape(p, p))
        self.V = tc.tensor(np.zeros((n, n)) if self.V is None else np.atleast_2d(self.V))
        self.W = tc.tensor(np.eye(q) if self.W is None else np.atleast_2d(self.W))
        self.z0 = tc.tensor(np.zeros(n) if self.z0 is None else np.asarray(self.z0).reshape(n))
        self.P0 = tc.tensor(np.zeros((n, n)) if self.P0 is None else np.atleast_2d(self.P0))
        for name, M, size in (("Q", self.Q, n), ("V", self.V, n), ("W", self.W, q), ("P0", self.P0, n)):
            if M.shape != (size, size):
                raise tc.ShapeError(f"{name} must be {size}x{size}, got {M.shape}")
        _sym_check("Q", self.Q, False)
        _sym_check("V", self.V, False)
        _sym_check("P0", self.P0, False)
        _sym_check("R", self.R, True)
        _sym_check("W", self.W, not self.allow_singular_W)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def q(self) -> int:
        return self.C.shape[0]

    @property
    def p(self) -> int:
        return self.B.shape[1]

    def replace(self, **changes) -> "StateSpaceModel":
        kw = {k: getattr(self, k) for k in ("A", "C", "B", "Q", "R", "V", "W", "z0", "P0", "allow_singular_W")}
        kw.update(changes)
        return StateSpaceModel(**kw)

    # dual-mode maps on row batches
    def transition(self, z, s=None):
        out = ad.matmul(z, self.A.T)
        if s is not None and self.p:
            out = out + ad.matmul(s, self.B.T)
        return out

    def jacobian(self, z):
        z = np.atleast_2d(z)
        return np.broadcast_to(self.A, (len(z),) + self.A.shape)

    def observe(self, z):
        return ad.matmul(z, self.C.T)

    def true_transition(self, z, s=None):
        return self.transition(z, s)

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist() for k in ("A", "B", "C", "Q", "R", "V", "W", "z0", "P0")}


# Lorenz drift written as A(z) z with A(z) = A0 + z[0] * M.
def _lorenz_parts(sigma, rho, beta):
    A0 = np.array([[-sigma, sigma, 0.0], [rho, -1.0, 0.0], [0.0, 0.0, -beta]])
    M = np.zeros((3, 3))
    M[1, 2] = -1.0
    M[2, 1] = 1.0
    return A0, M


@dataclass
class LorenzSystem:
    """Discretized Lorenz attractor with Gaussian process and observation noise.

    The filter model is the ``J``-term Taylor expansion of the frozen
    transition ``exp(A(z) dt) z``.  With ``truth="rk4"`` the data are
    generated instead by integrating the continuous system with classical
    Runge-Kutta on ``substeps`` sub-intervals of ``dt``, so the filter model
    is misspecified as in practice; ``truth="model"`` uses the Taylor map
    itself.
    """

    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    dt: float = 0.02
    J: int = 5
    C: Optional[np.ndarray] = None
    V: Optional[np.ndarray] = None
    W: Optional[np.ndarray] = None
    z0: Optional[np.ndarray] = None
    P0: Optional[np.ndarray] = None
    truth: str = "model"
    substeps: int = 10

    def __post_init__(self):
        if self.J < 1 or self.dt <= 0:
            raise ValueError("need J >= 1 and dt > 0")
        if self.truth not in ("model", "rk4"):
            raise ValueError(f"truth must be 'model' or 'rk4', got {self.truth!r}")
        self.C = tc.tensor(np.eye(3) if self.C is None else np.atleast_2d(self.C))
        if self.C.shape[1] != 3:
            raise tc.ShapeError(f"C must have 3 columns, got {self.C.shape}")
        q = self.C.shape[0]
        self.V = tc.tensor(np.zeros((3, 3)) if self.V is None else np.atleast_2d(self.V))
        self.W = tc.tensor(np.eye(q) if self.W is None else np.atleast_2d(self.W))
        self.z0 = tc.tensor(np.ones(3) if self.z0 is None else np.asarray(self.z0).reshape(3))
        self.P0 = tc.tensor(np.zeros((3, 3)) if self.P0 is None else np.atleast_2d(self.P0))
        _sym_check("V", self.V, False)
        _sym_check("W", self.W, False)
        self.A0, self.M = _lorenz_parts(self.sigma, self.rho, self.beta)
        self._e1 = np.array([[1.0], [0.0], [0.0]])

    n = property(lambda self: 3)
    q = property(lambda self: self.C.shape[0])
    p = property(lambda self: 0)
    B = property(lambda self: np.zeros((3, 0)))

    def drift(self, z):
        """Continuous-time vector field on a batch of states."""
        z = np.atleast_2d(z)
        x, y, w = z[:, 0], z[:, 1], z[:, 2]
        return np.stack([self.sigma * (y - x), x * (self.rho - w) - y, x * y - self.beta * w], axis=1)

    def transition(self, z, s=None, dt=None):
        """Taylor map ``sum_{j<=J} (A(z) dt)^j / j! z``; dual-mode."""
        dt = self.dt if dt is None else dt
        lead = ad.matmul(z, self._e1)  # first coordinate, shape (B, 1)
        term = z
        out = z
        for j in range(1, self.J + 1):
            term = ad.matmul(term, self.A0.T) + ad.multiply(lead, ad.matmul(term, self.M.T))
            term = ad.scale(term, dt / j)
            out = out + term
        return out

    def jacobian(self, z, dt=None):
        """Analytic Jacobian of :meth:`transition`, shape ``(B, 3, 3)``."""
        dt = self.dt if dt is None else dt
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        A = self.A0[None] + z[:, 0, None, None] * self.M[None]
        y = z[:, :, None]
        Jk = np.broadcast_to(np.eye(3), A.shape).copy()
        F = Jk.copy()
        for j in range(1, self.J + 1):
            c = dt / j
            # y_j = c A y_{j-1};  dy_j/dz = c (A dy_{j-1}/dz + M y_{j-1} e1^T)
            Jk = c * (A @ Jk + (self.M @ y) * np.array([1.0, 0.0, 0.0])[None, None, :])
            y = c * (A @ y)
            F += Jk
        return F

    def observe(self, z):
        return ad.matmul(z, self.C.T)

    def rk4(self, z, dt, steps=1):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        h = dt / steps
        for _ in range(steps):
            k1 = self.drift(z)
            k2 = self.drift(z + 0.5 * h * k1)
            k3 = self.drift(z + 0.5 * h * k2)
            k4 = self.drift(z + h * k3)
            z = z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return z

    def true_transition(self, z, s=None):
        if self.truth == "rk4":
            return self.rk4(z, self.dt, self.substeps)
        return self.transition(np.atleast_2d(z))

    def to_dict(self) -> dict:
        return {
            "kind": "lorenz", "sigma": self.sigma, "rho": self.rho, "beta": self.beta,
            "dt": self.dt, "J": self.J, "truth": self.truth, "substeps": self.substeps,
            "C": np.asarray(self.C).tolist(), "V": np.asarray(self.V).tolist(),
            "W": np.asarray(self.W).tolist(), "z0": np.asarray(self.z0).tolist(),
        }


def lorenz_model(dt: float = 0.02, J: int = 5, **kwargs) -> LorenzSystem:
    return LorenzSystem(dt=dt, J=J, **kwargs)


def cubic_observation(y):
    """Invertible observation nonlinearity ``y + y^3 / 2``."""
    return y + 0.5 * y ** 3


@dataclass
class Trajectory:
    z: np.ndarray  # (T, n) states z_1..z_T
    x: np.ndarray  # (T, q) observations x_1..x_T
    s: np.ndarray  # (T, p) actions s_0..s_{T-1}
    z0: np.ndarray

    def __len__(self):
        return len(self.z)


def _rng(seed):
    if isinstance(seed, (tuple, list)):
        return make_rng(seed[0], *seed[1:])
    return make_rng(seed)


def _zero_policy(p):
    return lambda t, x: np.zeros(p)


def simulate(model, policy: Optional[Callable] = None, T: int = 100, seed=0,
             obs_transform: Optional[Callable] = None) -> Trajectory:
    """Sample one trajectory of length ``T``.

    ``policy(t, x_t)`` returns the action ``s_t``; it is called with
    ``x=None`` at ``t=0`` and, if it has a ``reset`` method, reset first.
    ``seed`` is an integer or a stream path such as ``(seed, i)``.
    """
    return simulate_many(model, T, [seed], policy, obs_transform)[0]


def simulate_many(model, T: int, seeds, policy: Optional[Callable] = None,
                  obs_transform: Optional[Callable] = None) -> list:
    """Trajectories for each seed; equal to calling :func:`simulate` per seed up to rounding.

    Without a policy the states of all runs are advanced together.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    n, q, p = model.n, model.q, model.p
    N = len(seeds)
    sv, sw = _psd_sqrt(np.asarray(model.V)), _psd_sqrt(np.asarray(model.W))
    noise_v = np.empty((N, T, n))
    noise_w = np.empty((N, T, q))
    for i, seed in enumerate(seeds):
        rng = _rng(seed)
        noise_v[i] = rng.standard_normal((T, n)) @ sv.T
        noise_w[i] = rng.standard_normal((T, q)) @ sw.T
    Z = np.empty((N, T, n))
    X = np.empty((N, T, q))
    S = np.zeros((N, T, p))
    obs = obs_transform or (lambda y: y)
    if policy is None or p == 0:
        z = np.broadcast_to(np.asarray(model.z0), (N, n)).copy()
        for t in range(T):
            z = np.asarray(model.true_transition(z, S[:, t])) + noise_v[:, t]
            Z[:, t] = z
            X[:, t] = obs(z @ np.asarray(model.C).T + noise_w[:, t])
    else:
        for i in range(N):
            if hasattr(policy, "reset"):
                policy.reset()
            z = np.asarray(model.z0)[None].copy()
            x = None
            for t in range(T):
                S[i, t] = np.asarray(policy(t, x)).reshape(p)
                z = np.asarray(model.true_transition(z, S[i, t][None])) + noise_v[i, t]
                Z[i, t] = z[0]
                x = obs(z[0] @ np.asarray(model.C).T + noise_w[i, t])
                X[i, t] = x
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(X))):
        raise ArithmeticError("simulation produced non-finite values")
    return [Trajectory(Z[i], X[i], S[i], np.asarray(model.z0)) for i in range(N)]
