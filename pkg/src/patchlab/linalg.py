"""Least-squares fitting and singular values, on top of numpy.linalg."""

from __future__ import annotations

import numpy as np

__all__ = ["least_squares_fit", "singular_values"]

_RANK_TOL = 1e-10


def least_squares_fit(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Solve argmin_A ||X A - Y||_F without an intercept.

    X is n x d, Y is n x d'; X must have at least as many rows as columns
    and full column rank (singular values above 1e-10, uncentered — any
    centering is the caller's decision).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError("least_squares_fit expects 2-D arrays")
    n, d = x.shape
    if y.shape[0] != n:
        raise ValueError(f"row mismatch: X has {n} rows, Y has {y.shape[0]}")
    if n < d:
        raise ValueError(f"need n >= d, got n={n}, d={d}")
    sv = np.linalg.svd(x, compute_uv=False)
    rank = int(np.sum(sv > _RANK_TOL))
    if rank < d:
        raise ValueError(f"rank-deficient design matrix: {d - rank} deficient columns")
    sol, *_ = np.linalg.lstsq(x, y, rcond=None)
    return sol


def singular_values(m: np.ndarray) -> np.ndarray:
    """Singular values of a matrix, descending; entries must be finite."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("singular_values expects a 2-D array")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return np.linalg.svd(m, compute_uv=False)
