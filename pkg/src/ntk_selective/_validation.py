"""Input validation helpers shared by the estimators and functional cores."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array

UNIT_NORM_TOL = 1e-9


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when an NTK matrix fails the positive-definiteness assumption."""


def check_probability(value, name: str = "delta") -> float:
    if not isinstance(value, numbers.Real) or not (0.0 < float(value) < 1.0):
        raise ValueError(f"{name} must lie in (0, 1), got {value!r}")
    return float(value)


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_unit_norm(X, tol: float = UNIT_NORM_TOL, name: str = "X") -> np.ndarray:
    """Return ``X`` as a 2-d float array, raising if any row is not unit norm."""
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    norms = np.linalg.norm(X, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
    if bad.size:
        raise ValueError(
            f"{name} rows must have unit Euclidean norm (tol {tol:g}); "
            f"row {bad[0]} has norm {norms[bad[0]]:.12g}"
        )
    return X


def check_binary_labels(y) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError("labels must be a 1-d array")
    if not np.all(np.isin(y, (-1, 1))):
        raise ValueError("labels must take values in {-1, +1}")
    return y.astype(np.int64)


def augment(X) -> np.ndarray:
    """Stack the two action embeddings of each row: ``(x, 0)`` then ``(0, x)``.

    Returns an array of shape ``(n, 2, 2d)``; index 0 is action +1.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    out = np.zeros((n, 2, 2 * d))
    out[:, 0, :d] = X
    out[:, 1, d:] = X
    return out


def flatten_augmented(X) -> np.ndarray:
    """Point-set layout for kernels: all ``(x_t, 0)`` rows followed by all ``(0, x_t)``."""
    A = augment(X)
    return np.concatenate([A[:, 0, :], A[:, 1, :]], axis=0)
