"""Small fully connected networks on the autograd engine, plus weight files.

Weights live in plain ``dict[str, ndarray]`` so they plug straight into
:func:`mbdl.training.fit`.  ``mlp_apply`` is dual-mode: pass tape leaves to
differentiate, plain arrays to just evaluate.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autograd as ad
from . import tensor as tc

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "sigmoid": ad.sigmoid, None: lambda v: v}


def init_mlp(sizes, rng, gain: float = 1.0, prefix: str = "") -> dict:
    """He/Glorot-style scaled Gaussian weights for layer widths ``sizes``."""
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}W{i}"] = gain * rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
        params[f"{prefix}b{i}"] = np.zeros(fan_out)
    return params


def n_layers(params: dict, prefix: str = "") -> int:
    return sum(1 for k in params if k.startswith(f"{prefix}W") and k[len(prefix) + 1:].isdigit())


def mlp_apply(params: dict, x, act: str = "relu", prefix: str = ""):
    """Hidden layers use ``act``; the last layer is affine."""
    L = n_layers(params, prefix)
    h = x
    for i in range(L):
        h = ad.matmul(h, ad.transpose(params[f"{prefix}W{i}"])) + params[f"{prefix}b{i}"]
        if i < L - 1:
            h = ACTIVATIONS[act](h)
    return h


def as_leaves(tape: ad.Tape, params: dict) -> dict:
    return {k: tape.var(v) for k, v in params.items()}


def save_weights(directory, params: dict, kind: str, meta: dict | None = None) -> None:
    """Tensor file per array and a ``manifest.json`` with a ``kind`` tag."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, arr in params.items():
        tc.save_tensor(directory / f"{name}.mbt", np.asarray(arr))
        tensors[name] = f"{name}.mbt"
    manifest = {"kind": kind, "tensors": tensors, **(meta or {})}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_weights(directory):
    """Return ``(params, manifest)``."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    params = {name: np.array(tc.load_tensor(directory / f)) for name, f in manifest["tensors"].items()}
    return params, manifest
