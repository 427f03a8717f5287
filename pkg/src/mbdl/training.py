"""Empirical risk, mini-batch SGD, synthetic data and the shared fit loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .sparse import NumericalError

__all__ = [
    "make_rng",
    "Dataset",
    "TrainConfig",
    "FitResult",
    "empirical_risk",
    "sgd_step",
    "fit",
    "gen_sparse_dataset",
    "gen_trajectory_dataset",
    "mse_db",
]

log = logging.getLogger(__name__)

DEFAULT_SPLITS = (0.7, 0.15, 0.15)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed`` and an integer stream path.

    Distinct stream paths give statistically independent generators, so
    workers can draw in any order and still reproduce the same numbers.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def mse_db(mse) -> float:
    return 10.0 * math.log10(float(mse))


def _make_splits(N, fractions, rng):
    fractions = np.asarray(fractions, dtype=float)
    if fractions.shape != (3,) or np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ValueError(f"split fractions must be 3 non-negative numbers summing to 1, got {fractions}")
    perm = rng.permutation(N)
    n_train = int(round(fractions[0] * N))
    n_val = int(round(fractions[1] * N))
    n_val = min(n_val, N - n_train)
    return (
        np.sort(perm[:n_train]),
        np.sort(perm[n_train:n_train + n_val]),
        np.sort(perm[n_train + n_val:]),
    )


@dataclass
class Dataset:
    """Paired inputs/targets with disjoint train/validation/test index splits.

    ``extras`` carries side information such as the measurement matrix or
    the control sequences of trajectory data.
    """

    inputs: np.ndarray
    targets: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int = 0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        N = len(self.inputs)
        if len(self.targets) != N:
            raise ValueError("inputs and targets have different lengths")
        allidx = np.concatenate([self.train, self.val, self.test])
        if len(allidx) != N or not np.array_equal(np.sort(allidx), np.arange(N)):
            raise ValueError("splits must be disjoint and cover every index")

    def __len__(self):
        return len(self.inputs)

    def split(self, name: str) -> np.ndarray:
        try:
            return {"train": self.train, "val": self.val, "validation": self.val, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None

    def take(self, idx, key: Optional[str] = None):
        """``(inputs, targets)`` rows for ``idx``, or one ``extras`` array."""
        if key is None:
            return self.inputs[idx], self.targets[idx]
        return self.extras[key][idx]


@dataclass
class TrainConfig:
    lr: float = 1e-3
    schedule: str = "constant"
    decay: float = 0.5
    decay_every: int = 1000
    batch_size: int = 32
    epochs: int = 10
    momentum: float = 0.0
    seed: int = 0
    clip: Optional[float] = None

    def __post_init__(self):
        if self.schedule not in ("constant", "step"):
            raise ValueError(f"schedule must be 'constant' or 'step', got {self.schedule!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.lr < 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and lr >= 0 required")

    def learning_rate(self, j: int) -> float:
        if self.schedule == "constant":
            return self.lr
        return self.lr * self.decay ** (j // self.decay_every)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train settings {sorted(unknown)}")
        return cls(**d)


def _l2(pred, target):
    d = (np.asarray(pred) - np.asarray(target)).reshape(len(pred), -1)
    return np.sum(d * d, axis=1)


def _zero_one(pred, target):
    p = np.asarray(pred).reshape(len(pred), -1)
    t = np.asarray(target).reshape(len(target), -1)
    return np.any(p != t, axis=1).astype(float)


LOSSES = {"l2": _l2, "zero-one": _zero_one}


def empirical_risk(rule: Callable, dataset: Dataset, split="test", loss="l2") -> float:
    """Mean of ``loss(rule(x_i), s_i)`` over a split.

    ``rule`` maps a stack of inputs to a stack of predictions.  ``split`` is a
    split name or an explicit index array.
    """
    idx = dataset.split(split) if isinstance(split, str) else np.asarray(split)
    if len(idx) == 0:
        raise ValueError("empirical risk over an empty split")
    try:
        lossfn = LOSSES[loss]
    except KeyError:
        raise ValueError(f"unknown loss {loss!r}; options: {sorted(LOSSES)}") from None
    x, s = dataset.take(idx)
    return float(np.mean(lossfn(rule(x), s)))


def sgd_step(params: dict, grads: dict, config: TrainConfig, j: int, velocity: Optional[dict] = None) -> dict:
    """One step ``theta <- theta - eta_j * v`` with ``v <- m v + g``.

    ``velocity`` is updated in place when momentum is used.
    """
    if set(grads) != set(params):
        raise KeyError(f"gradient keys {sorted(grads)} do not match parameters {sorted(params)}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name!r}")
    if config.clip is not None:
        total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if total > config.clip:
            grads = {k: g * (config.clip / total) for k, g in grads.items()}
    eta = config.learning_rate(j)
    out = {}
    for name, theta in params.items():
        g = grads[name]
        if config.momentum:
            if velocity is None:
                raise ValueError("momentum requires a velocity dict")
            v = config.momentum * velocity.get(name, 0.0) + g
            velocity[name] = v
            g = v
        out[name] = theta - eta * g
    return out


@dataclass
class FitResult:
    params: dict
    trace: list  # per-step mini-batch loss
    epoch_loss: list
    val_loss: list  # index 0 is the initial parameters
    best_epoch: int
    diverged: bool = False


def fit(
    params: dict,
    objective: Callable,
    train_idx,
    config: TrainConfig,
    validate: Optional[Callable] = None,
    on_epoch: Optional[Callable] = None,
) -> FitResult:
    """Mini-batch SGD over ``train_idx``.

    ``objective(params, batch_idx) -> (loss, grads)``; ``validate(params)``
    returns a scalar and selects the returned checkpoint (initial parameters
    included).  Without ``validate`` the last iterate is returned.  A
    non-finite loss or gradient stops training and returns the last finite
    iterate.
    """
    train_idx = np.asarray(train_idx)
    if config.epochs and config.batch_size > len(train_idx):
        raise ValueError(f"batch size {config.batch_size} exceeds train split of {len(train_idx)}")
    rng = make_rng(config.seed, 7)
    velocity: dict = {}
    trace, epoch_loss, val_loss = [], [], []
    best = dict(params)
    best_epoch = 0
    if validate is not None:
        best_val = float(validate(params))
        val_loss.append(best_val)
    j = 0
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(train_idx)
        losses = []
        for start in range(0, len(perm) - config.batch_size + 1, config.batch_size):
            batch = perm[start:start + config.batch_size]
            loss, grads = objective(params, batch)
            if not np.isfinite(loss):
                log.warning("non-finite loss at step %d; keeping last finite iterate", j)
                return FitResult(best if validate else params, trace, epoch_loss, val_loss, best_epoch, True)
            try:
                new = sgd_step(params, grads, config, j, velocity)
            except NumericalError:
                log.warning("non-finite gradient at step %d; keeping last finite iterate", j)
                return FitResult(best if validate else params, trace, epoch_loss, val_loss, best_epoch, True)
            if not all(np.all(np.isfinite(v)) for v in new.values()):
                return FitResult(best if validate else params, trace, epoch_loss, val_loss, best_epoch, True)
            params = new
            trace.append(float(loss))
            losses.append(float(loss))
            j += 1
        epoch_loss.append(float(np.mean(losses)) if losses else float("nan"))
        if validate is not None:
            v = float(validate(params))
            val_loss.append(v)
            if v < best_val:
                best_val, best, best_epoch = v, dict(params), epoch
        if on_epoch is not None:
            on_epoch(epoch, params)
    if validate is None:
        best, best_epoch = params, config.epochs
    return FitResult(best, trace, epoch_loss, val_loss, best_epoch)


def gen_sparse_dataset(m, n, k, sigma, N, seed, H=None, splits=DEFAULT_SPLITS) -> Dataset:
    """Samples of ``x = H s + w`` with ``k``-sparse Gaussian ``s``, ``w ~ N(0, sigma^2 I)``.

    ``H`` has i.i.d. Gaussian entries with unit-norm columns unless given.
    It is stored in ``extras["H"]``.
    """
    if k > n:
        raise ValueError(f"sparsity {k} exceeds dimension {n}")
    if H is None:
        H = make_rng(seed, 0).standard_normal((m, n))
        H /= np.linalg.norm(H, axis=0)
    H = np.asarray(H, dtype=float)
    rng = make_rng(seed, 1)
    S = np.zeros((N, n))
    for i in range(N):
        support = rng.choice(n, size=k, replace=False)
        S[i, support] = rng.standard_normal(k)
    W = make_rng(seed, 2).standard_normal((N, m))
    X = S @ H.T + sigma * W
    train, val, test = _make_splits(N, splits, make_rng(seed, 3))
    return Dataset(X, S, train, val, test, seed, extras={"H": H, "sigma": float(sigma), "k": int(k)})


def gen_trajectory_dataset(model, T, N, seed, policy=None, splits=DEFAULT_SPLITS, **sim_kwargs) -> Dataset:
    """``N`` simulated trajectories: inputs are observations, targets are states.

    ``model`` is a :class:`~mbdl.statespace.StateSpaceModel` or a
    :class:`~mbdl.statespace.LorenzSystem`; control sequences land in
    ``extras["S"]``.
    """
    from . import statespace as ss

    trajs = ss.simulate_many(model, T, [(seed, i) for i in range(N)], policy, **sim_kwargs)
    Z = [tr.z for tr in trajs]
    X = [tr.x for tr in trajs]
    S = [tr.s for tr in trajs]
    train, val, test = _make_splits(N, splits, make_rng(seed, 3))
    return Dataset(
        np.stack(X), np.stack(Z), train, val, test, seed,
        extras={"S": np.stack(S), "T": int(T)},
    )
