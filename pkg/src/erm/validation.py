"""Input validation helpers shared by the estimator and the kernels."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.exceptions import NotFittedError


def check_vector(v, name: str = "vector", dim: int | None = None) -> np.ndarray:
    """Coerce ``v`` to a finite 1-d float64 array, optionally of length ``dim``."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"dimension mismatch for {name}: expected {dim}, got {arr.shape[0]}")
    return arr


def check_matrix(m, name: str = "matrix", dim: int | None = None) -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"dimension mismatch for {name}: expected {dim}, got {arr.shape[1]}")
    return arr


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_fraction(value, name: str, low: float = 0.0, high: float = 1.0,
                   closed_low: bool = True, closed_high: bool = True) -> float:
    value = float(value)
    ok_low = value >= low if closed_low else value > low
    ok_high = value <= high if closed_high else value < high
    if not (np.isfinite(value) and ok_low and ok_high):
        lb = "[" if closed_low else "("
        rb = "]" if closed_high else ")"
        raise ValueError(f"{name} must lie in {lb}{low}, {high}{rb}, got {value}")
    return value


def check_indexed(estimator, attributes=("store_",)) -> None:
    missing = [a for a in attributes if getattr(estimator, a, None) is None]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} has no index yet; call fit() with a corpus first"
        )
