"""Agreement metrics for continuous emotion tracks."""

from __future__ import annotations

import numpy as np


def _pair(y, yhat, min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.size} vs {yhat.size}")
    if y.size < min_len:
        raise ValueError(f"need at least {min_len} values, got {y.size}")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(yhat))):
        raise ValueError("non-finite values in score series")
    return y, yhat


def ccc(y, yhat) -> float:
    """Concordance correlation coefficient with population (1/n) moments.

    Computed in covariance form, ``2 cov / (var_y + var_yhat + (mu_y - mu_yhat)^2)``,
    which stays defined when one series is constant (the result is then 0).
    Two identical constant series return 1.0.
    """
    y, yhat = _pair(y, yhat, min_len=2)
    mu_y, mu_p = y.mean(), yhat.mean()
    dy, dp = y - mu_y, yhat - mu_p
    cov = np.mean(dy * dp)
    denom = np.mean(dy * dy) + np.mean(dp * dp) + (mu_y - mu_p) ** 2
    if denom == 0.0:
        return 1.0
    return float(2.0 * cov / denom)


def pearson(y, yhat) -> float:
    y, yhat = _pair(y, yhat, min_len=2)
    dy, dp = y - y.mean(), yhat - yhat.mean()
    sy, sp = np.sqrt(np.mean(dy * dy)), np.sqrt(np.mean(dp * dp))
    if sy == 0.0 or sp == 0.0:
        raise ValueError("pearson correlation undefined for a zero-variance series")
    r = np.mean(dy * dp) / (sy * sp)
    return float(np.clip(r, -1.0, 1.0))


def squared_errors(y, yhat) -> np.ndarray:
    """Per-frame squared error. Works element-wise on any matching shapes."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {yhat.shape}")
    return (y - yhat) ** 2
