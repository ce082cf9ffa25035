"""Input validation helpers shared by the estimator classes."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

from .numerics import default_dtype


def check_vectors(X, expected_dim: int | None = None, name: str = "X") -> np.ndarray:
    """Validate a 2-D float array of row vectors; returns a default-dtype copy."""
    a = np.asarray(X)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D (n_samples, dim), got shape {a.shape}")
    if a.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.issubdtype(a.dtype, np.floating) and not np.issubdtype(a.dtype, np.integer):
        raise ValueError(f"{name} must be numeric, got dtype {a.dtype}")
    a = a.astype(default_dtype(), copy=True)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf")
    if expected_dim is not None and a.shape[1] != expected_dim:
        raise ValueError(
            f"{name} has dim {a.shape[1]}, expected {expected_dim}")
    return a


def check_fitted(estimator, attr: str) -> None:
    if not hasattr(estimator, attr):
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first")
