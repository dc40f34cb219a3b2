"""Input validation helpers shared by the estimator, the functional API and the CLI."""

from __future__ import annotations

import numbers

import numpy as np


def check_finite(name: str, value) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_nonnegative(name: str, value: float) -> float:
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be a finite real >= 0, got {value!r}")
    return float(value)


def check_positive_int(name: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be an integer >= 1, got {value!r}")
    return int(value)


def check_panel_arrays(X, y) -> tuple[np.ndarray, np.ndarray]:
    """Validate a balanced binary panel.

    Parameters
    ----------
    X : array-like of shape (n, T, p) or (n, T)
        Covariates per subject and occasion. A 2-d array of shape ``(n, T)``
        is one covariate; ``None`` means no covariates.
    y : array-like of shape (n, T)
        Binary responses.

    Returns
    -------
    X : ndarray of shape (n, T, p), float64
    y : ndarray of shape (n, T), int8
    """
    y = np.asarray(y)
    if y.ndim != 2:
        raise ValueError(f"y must have shape (n, T), got ndim={y.ndim}")
    n, T = y.shape
    if n < 1:
        raise ValueError("panel has no subjects")
    if T < 2:
        raise ValueError(f"panel needs T >= 2 occasions, got T={T}")
    if y.dtype.kind == "f" and not np.all(np.isfinite(y)):
        raise ValueError("y contains non-finite values")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("y must be binary (0/1)")

    if X is None:
        X = np.zeros((n, T, 0))
    X = np.asarray(X, dtype=float)
    if X.ndim == 2 and X.shape == (n, T):
        X = X[:, :, None]
    if X.ndim != 3 or X.shape[:2] != (n, T):
        raise ValueError(f"X must have shape (n, T, p) = ({n}, {T}, p), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    return np.ascontiguousarray(X), np.ascontiguousarray(y, dtype=np.int8)


def check_probability_vector(name: str, p: np.ndarray, atol: float = 1e-12) -> None:
    if np.any(p < 0) or not np.isclose(p.sum(), 1.0, rtol=0.0, atol=atol):
        raise ValueError(f"{name} must be non-negative and sum to 1")


def check_stochastic_matrix(name: str, P: np.ndarray, atol: float = 1e-12) -> None:
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"{name} must be square, got shape {P.shape}")
    if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0, rtol=0.0, atol=atol):
        raise ValueError(f"{name} rows must be non-negative and sum to 1")
