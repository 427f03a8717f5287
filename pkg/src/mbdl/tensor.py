"""Dense float64 tensors and the linear-algebra kernels shared by every solver.

Tensors are plain row-major ``numpy.ndarray`` objects of dtype float64.  The
constructors here validate external input (finite entries, float64, C order)
and hand back read-only arrays so values can be shared freely.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np
import scipy.linalg

__all__ = [
    "ShapeError",
    "NotSPDError",
    "tensor",
    "matmul",
    "SPDFactor",
    "solve_spd",
    "soft_threshold",
    "save_tensor",
    "load_tensor",
    "export_csv",
]

MAGIC = b"MBDLTNSR"
SPD_PIVOT_MIN = 1e-12
SPD_SYMMETRY_TOL = 1e-10


class ShapeError(ValueError):
    pass


class NotSPDError(np.linalg.LinAlgError):
    pass


def tensor(data, copy: bool = True) -> np.ndarray:
    """Build an immutable float64 tensor from external data.

    Raises ``ValueError`` if any entry is NaN or infinite.
    """
    arr = np.array(data, dtype=np.float64, order="C", copy=copy)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor entries must be finite")
    arr.setflags(write=False)
    return arr


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


class SPDFactor:
    """Cholesky factor of a symmetric positive definite matrix.

    Keep one of these around when the same system is solved many times,
    e.g. ``H^T H + 2 lambda I`` inside ADMM.
    """

    def __init__(self, a):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"expected a square matrix, got {a.shape}")
        scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
        if np.max(np.abs(a - a.T), initial=0.0) > SPD_SYMMETRY_TOL * scale:
            raise NotSPDError("matrix is not symmetric")
        self.n = a.shape[0]
        self.lower = self._cholesky(a)

    @staticmethod
    def _cholesky(a):
        # Plain Cholesky so the pivot threshold is ours, not LAPACK's.
        try:
            low = np.linalg.cholesky(a)
        except np.linalg.LinAlgError as exc:
            raise NotSPDError("matrix is not positive definite") from exc
        if low.size and np.min(np.diag(low)) ** 2 <= SPD_PIVOT_MIN:
            raise NotSPDError(
                f"pivot {np.min(np.diag(low)) ** 2:.3e} <= {SPD_PIVOT_MIN:g}"
            )
        return low

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        if b.shape[:1] != (self.n,):
            raise ShapeError(f"rhs shape {b.shape} does not match system size {self.n}")
        return scipy.linalg.cho_solve((self.lower, True), b, check_finite=False)


def solve_spd(a, b) -> np.ndarray:
    return SPDFactor(a).solve(b)


def soft_threshold(x, beta) -> np.ndarray:
    """Elementwise ``sign(x) * max(0, |x| - beta)``; exactly 0 at ``|x| == beta``."""
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta < 0):
        raise ValueError("soft_threshold requires beta >= 0")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - beta, 0.0)


def save_tensor(path, arr) -> None:
    """Write ``arr`` in the binary tensor format (magic, rank, extents, payload)."""
    arr = np.array(arr, dtype="<f8", order="C")  # ascontiguousarray would promote scalars to 1-D
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:8]!r}")
    (rank,) = struct.unpack_from("<I", raw, 8)
    offset = 12 + 8 * rank
    shape = struct.unpack_from(f"<{rank}Q", raw, 12)
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) - offset != 8 * count:
        raise ValueError(
            f"{path}: payload is {len(raw) - offset} bytes, expected {8 * count}"
        )
    arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    return tensor(arr.reshape(shape).astype(np.float64))


def export_csv(path, arr) -> None:
    """One row per trailing-dimension slice, 17 significant digits."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 0:
        rows = arr.reshape(1, 1)
    else:
        rows = arr.reshape(-1, arr.shape[-1]) if arr.shape[-1] else arr.reshape(-1, 0)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in rows:
            writer.writerow([format(v, ".17g") for v in row])
