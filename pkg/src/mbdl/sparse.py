"""Model-based sparse recovery: the LASSO objective and ISTA, FISTA and ADMM.

All solvers accept a single measurement ``x`` of shape ``(m,)`` or a batch of
measurements stacked as rows, ``(N, m)``; iterates then have shape ``(n,)`` or
``(N, n)``.  Operators are applied on the right (``s @ H.T``) so both cases
share one code path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autograd as ad
from . import tensor as tc

__all__ = [
    "SparseProblem",
    "AdmmHyper",
    "Prior",
    "L1Prior",
    "NumericalError",
    "lasso_objective",
    "l1_prior_prox",
    "spectral_norm",
    "default_step",
    "ista",
    "fista",
    "admm",
    "admm_iterations",
]


class NumericalError(ArithmeticError):
    """A solver or trainer produced non-finite values."""


@dataclass
class SparseProblem:
    """Parameters of ``1/2 ||x - H Psi r||^2 + rho ||r||_1``.

    ``Psi=None`` means the identity dictionary.  ``rho`` is the single
    effective sparsity weight; the noise variance ``sigma2`` is carried for
    bookkeeping (data generation, plug-and-play noise levels) and does not
    enter the objective separately.
    """

    H: np.ndarray
    Psi: Optional[np.ndarray] = None
    rho: float = 0.1
    sigma2: float = 0.0

    def __post_init__(self):
        self.H = tc.tensor(np.atleast_2d(self.H))
        if not np.any(self.H):
            raise ValueError("H must be nonzero")
        if self.Psi is not None:
            self.Psi = tc.tensor(self.Psi)
            n = self.H.shape[1]
            if self.Psi.shape != (n, n):
                raise tc.ShapeError(f"Psi must be {n}x{n}, got {self.Psi.shape}")
        if self.rho < 0 or self.sigma2 < 0:
            raise ValueError("rho and sigma2 must be non-negative")

    @property
    def shape(self):
        return self.H.shape

    @property
    def operator(self) -> np.ndarray:
        """Effective operator acting on the sparse coefficients."""
        return self.H if self.Psi is None else self.H @ self.Psi

    def synthesize(self, r):
        return r if self.Psi is None else r @ self.Psi.T

    def save(self, path) -> None:
        """Write a JSON descriptor plus tensor files next to it."""
        path = Path(path)
        stem = path.with_suffix("")
        tc.save_tensor(f"{stem}.H.mbt", self.H)
        desc = {"H": f"{stem.name}.H.mbt", "Psi": "identity", "rho": self.rho, "sigma2": self.sigma2}
        if self.Psi is not None:
            tc.save_tensor(f"{stem}.Psi.mbt", self.Psi)
            desc["Psi"] = f"{stem.name}.Psi.mbt"
        path.write_text(json.dumps(desc, indent=2, sort_keys=True))

    @classmethod
    def from_descriptor(cls, desc: dict, base=".") -> "SparseProblem":
        base = Path(base)
        missing = {"H", "rho"} - set(desc)
        if missing:
            raise KeyError(f"problem descriptor missing {sorted(missing)}")
        psi = desc.get("Psi", "identity")
        return cls(
            H=tc.load_tensor(base / desc["H"]),
            Psi=None if psi in (None, "identity") else tc.load_tensor(base / psi),
            rho=float(desc["rho"]),
            sigma2=float(desc.get("sigma2", 0.0)),
        )

    @classmethod
    def load(cls, path) -> "SparseProblem":
        path = Path(path)
        return cls.from_descriptor(json.loads(path.read_text()), base=path.parent)


@dataclass
class AdmmHyper:
    lam: float = 1.0
    mu: float = 1.0
    max_iter: int = 5000
    tol: float = 1e-8

    def __post_init__(self):
        if not (self.lam > 0 and self.mu > 0):
            raise ValueError(f"ADMM needs lam > 0 and mu > 0, got {self.lam}, {self.mu}")
        if self.max_iter < 1 or self.tol <= 0:
            raise ValueError("max_iter must be >= 1 and tol > 0")


def l1_prior_prox(v, weight):
    """Proximal map of ``weight * ||.||_1``."""
    return tc.soft_threshold(v, weight)


@dataclass
class Prior:
    """A regularizer given through its proximal map ``prox(v, weight)``."""

    prox: Callable
    value: Optional[Callable] = None


class L1Prior(Prior):
    """``phi(s) = rho ||s||_1``; its prox also accepts tape values."""

    def __init__(self, rho: float):
        self.rho = float(rho)
        super().__init__(prox=self._prox, value=self._value)

    def __repr__(self):
        return f"L1Prior(rho={self.rho})"

    def _prox(self, v, weight):
        if isinstance(v, ad.Var) or isinstance(weight, ad.Var):
            return ad.soft_threshold(v, ad.scale(weight, self.rho))
        return l1_prior_prox(v, self.rho * np.asarray(weight))

    def _value(self, s):
        return self.rho * float(np.sum(np.abs(s)))


def lasso_objective(p: SparseProblem, x, r) -> float:
    """``1/2 ||x - H Psi r||^2 + rho ||r||_1``, summed over a batch if given."""
    x = np.asarray(x, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    G = p.operator
    if x.shape[-1] != G.shape[0] or r.shape[-1] != G.shape[1] or x.shape[:-1] != r.shape[:-1]:
        raise tc.ShapeError(f"shapes x{x.shape}, r{r.shape} do not fit operator {G.shape}")
    resid = x - r @ G.T
    return 0.5 * float(np.sum(resid * resid)) + p.rho * float(np.sum(np.abs(r)))


def spectral_norm(H, iters: int = 100) -> float:
    """Largest singular value of ``H`` by power iteration on ``H^T H``."""
    H = np.asarray(H, dtype=np.float64)
    v = np.ones(H.shape[1]) / np.sqrt(H.shape[1])
    for _ in range(iters):
        w = H.T @ (H @ v)
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
    return float(np.sqrt(np.linalg.norm(H.T @ (H @ v))))


def default_step(p: SparseProblem) -> float:
    return 0.9 / spectral_norm(p.operator) ** 2


def _check(x, p):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.H.shape[0]:
        raise tc.ShapeError(f"x has trailing size {x.shape[-1]}, H is {p.H.shape}")
    return x


def _finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{what} produced non-finite values")


def ista(p: SparseProblem, x, mu: Optional[float] = None, K: int = 500, callback=None):
    """``K`` iterations of ``s <- T_{mu rho}(s + mu H^T (x - H s))`` from zero.

    ``callback(k, r_k, change)`` is invoked after every iteration with the
    coefficient iterate and the norm of the last change.
    """
    x = _check(x, p)
    mu = default_step(p) if mu is None else mu
    if mu <= 0:
        raise ValueError("step size mu must be positive")
    G = p.operator
    r = np.zeros(x.shape[:-1] + (G.shape[1],))
    for k in range(1, K + 1):
        r_new = tc.soft_threshold(r + mu * ((x - r @ G.T) @ G), mu * p.rho)
        if callback is not None:
            callback(k, r_new, float(np.linalg.norm(r_new - r)))
        r = r_new
    _finite(r, "ista")
    return p.synthesize(r)


def fista(p: SparseProblem, x, mu: Optional[float] = None, K: int = 500, callback=None):
    """ISTA with Nesterov momentum, ``t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2``."""
    x = _check(x, p)
    mu = default_step(p) if mu is None else mu
    if mu <= 0:
        raise ValueError("step size mu must be positive")
    G = p.operator
    r = np.zeros(x.shape[:-1] + (G.shape[1],))
    y = r
    t = 1.0
    for k in range(1, K + 1):
        r_new = tc.soft_threshold(y + mu * ((x - y @ G.T) @ G), mu * p.rho)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = r_new + ((t - 1.0) / t_new) * (r_new - r)
        if callback is not None:
            callback(k, r_new, float(np.linalg.norm(r_new - r)))
        r, t = r_new, t_new
    _finite(r, "fista")
    return p.synthesize(r)


def admm(
    p: SparseProblem,
    x,
    hyper: Optional[AdmmHyper] = None,
    prior: Optional[Prior] = None,
    seed: Optional[int] = None,
    callback=None,
):
    """ADMM with splitting ``s = v``.

    Each iteration::

        s <- (G^T G + 2 lam I)^{-1} (G^T x + 2 lam (v - u))
        v <- prox_{phi / (2 lam)}(s + u)
        u <- u + mu (s - v)

    where ``G = H Psi``.  Stops at the first ``k`` with
    ``max(||s_k - v_k||, ||v_k - v_{k-1}||) <= tol`` (largest over a batch) or
    after ``max_iter`` iterations.  ``u`` and ``v`` start at zero unless a
    ``seed`` is given, in which case they are standard normal draws.
    """
    prior = prior or L1Prior(rho=p.rho)
    hyper = hyper or AdmmHyper()
    weight = 1.0 / (2.0 * hyper.lam)
    s, _ = admm_iterations(p, x, hyper, lambda w, k: prior.prox(w, weight), seed, callback)
    return p.synthesize(s)


def admm_iterations(p: SparseProblem, x, hyper: AdmmHyper, prox_step: Callable, seed=None, callback=None):
    """The ADMM loop shared by :func:`admm` and plug-and-play variants.

    ``prox_step(s + u, k)`` returns the new ``v`` at iteration ``k``.  Returns
    the coefficient iterate and ``info`` with ``iterations``, ``residual``
    and ``converged``.
    """
    x = _check(x, p)
    G = p.operator
    n = G.shape[1]
    factor = tc.SPDFactor(G.T @ G + 2.0 * hyper.lam * np.eye(n))
    shape = x.shape[:-1] + (n,)
    if seed is None:
        u = np.zeros(shape)
        v = np.zeros(shape)
    else:
        rng = np.random.default_rng(seed)
        u = rng.standard_normal(shape)
        v = rng.standard_normal(shape)
    gtx = x @ G
    s = v
    resid = float("inf")
    k = 0
    for k in range(1, hyper.max_iter + 1):
        s = factor.solve((gtx + 2.0 * hyper.lam * (v - u)).T).T
        v_new = prox_step(s + u, k)
        u = u + hyper.mu * (s - v_new)
        resid = max(_rownorm_max(s - v_new), _rownorm_max(v_new - v))
        v = v_new
        if callback is not None:
            callback(k, s, resid)
        if resid <= hyper.tol:
            break
    _finite(s, "admm")
    return s, {"iterations": k, "residual": resid, "converged": resid <= hyper.tol}


def _rownorm_max(d) -> float:
    return float(np.max(np.linalg.norm(np.atleast_2d(d), axis=-1)))
