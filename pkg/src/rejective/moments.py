"""Weighted finite-population moment operators.

All operators normalize by the total weight (divisor ``sum(w)``), with no
degrees-of-freedom correction.  ``weighted_variance(ones, x)`` therefore
divides by ``n``, not ``n - 1``.
"""

import numpy as np

__all__ = [
    "weighted_mean",
    "weighted_variance",
    "weighted_covariance",
]


def _check_weights(w: np.ndarray, n: int) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.shape[0] != n:
        raise ValueError(f"weights must be a length-{n} vector, got shape {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    if w.sum() <= 0:
        raise ValueError("total weight is zero")
    return w


def weighted_mean(w: np.ndarray, x: np.ndarray):
    """Weighted mean ``sum(w_i x_i) / sum(w_i)``.

    ``x`` may be a vector (returns a scalar) or an ``(n, k)`` matrix of
    per-unit rows (returns a length-``k`` vector).
    """
    x = np.asarray(x, dtype=float)
    w = _check_weights(w, x.shape[0])
    if x.ndim == 1:
        return float(w @ x / w.sum())
    return (w @ x) / w.sum()


def weighted_covariance(w: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Weighted covariance with divisor ``sum(w)``.

    For vector inputs returns the scalar
    ``sum(w_i (x_i - mean_w x)(y_i - mean_w y)) / sum(w)``.  For matrix
    inputs (rows = units) returns the ``(kx, ky)`` cross-covariance matrix.
    Computed in two passes (mean, then deviations) to control cancellation.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y must have the same number of units")
    w = _check_weights(w, x.shape[0])
    total = w.sum()
    xc = x - weighted_mean(w, x)
    yc = y - weighted_mean(w, y)
    if x.ndim == 1 and y.ndim == 1:
        return float(np.sum(w * xc * yc) / total)
    xc = np.atleast_2d(xc.T).T
    yc = np.atleast_2d(yc.T).T
    return (xc.T * w) @ yc / total


def weighted_variance(w: np.ndarray, x: np.ndarray):
    """Weighted variance with divisor ``sum(w)``; matrix of ``x`` rows
    gives the full covariance matrix."""
    return weighted_covariance(w, x, x)
