"""Small input-validation helpers used at module entry points.

All numeric computation in the package runs in float64; these helpers coerce
and check once at the boundary so inner loops can assume clean arrays.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def as_float_matrix(x, name: str = "x") -> np.ndarray:
    """Coerce to a 2-D float64 array (n, p). 1-D input becomes a column."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 1-D or 2-D, got ndim={arr.ndim}")
    if arr.shape[0] == 0:
        raise ShapeError(f"{name} has no rows")
    return arr


def as_float_vector(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ShapeError(f"{name} is empty")
    return arr


def check_same_rows(a: np.ndarray, b: np.ndarray, names=("x", "y")) -> None:
    if a.shape[0] != b.shape[0]:
        raise ShapeError(
            f"{names[0]} has {a.shape[0]} rows but {names[1]} has {b.shape[0]}"
        )


def check_finite(arr: np.ndarray, name: str = "array") -> None:
    if not np.isfinite(arr).all():
        raise ShapeError(f"{name} contains non-finite values")
