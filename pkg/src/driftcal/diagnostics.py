"""Run-quality metrics: fit errors, coverage, and chain convergence."""

from __future__ import annotations

import numpy as np

__all__ = ["rmse", "coverage_2sd", "split_rhat", "effective_sample_size"]


def rmse(predicted, observed) -> float:
    p = np.asarray(predicted, dtype=float)
    o = np.asarray(observed, dtype=float)
    return float(np.sqrt(np.mean((p - o) ** 2)))


def coverage_2sd(predicted_mean, predicted_sd, observed) -> float:
    """Fraction of observations inside the pointwise +/- 2 sd band."""
    m = np.asarray(predicted_mean, dtype=float)
    s = np.asarray(predicted_sd, dtype=float)
    o = np.asarray(observed, dtype=float)
    return float(np.mean(np.abs(o - m) <= 2.0 * s))


def split_rhat(chains: np.ndarray) -> float:
    """Split-Rhat over a (chains, draws) array of one scalar quantity.

    Each chain is split in half before comparing within- to between-chain
    variance; 1.0 indicates convergence.
    """
    c = np.atleast_2d(np.asarray(chains, dtype=float))
    n = c.shape[1] // 2
    if n < 2:
        return float("nan")
    halves = np.vstack([c[:, :n], c[:, n : 2 * n]])
    m = halves.shape[0]
    means = halves.mean(axis=1)
    variances = halves.var(axis=1, ddof=1)
    w = variances.mean()
    b = n * means.var(ddof=1) if m > 1 else 0.0
    if w <= 0:
        return 1.0 if b <= 0 else float("inf")
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def effective_sample_size(draws: np.ndarray, max_lag: int | None = None) -> float:
    """Autocorrelation-based ESS of a single stacked chain (initial positive window)."""
    x = np.asarray(draws, dtype=float).ravel()
    n = x.size
    if n < 4:
        return float(n)
    x = x - x.mean()
    denom = float(x @ x)
    if denom == 0:
        return float(n)
    if max_lag is None:
        max_lag = min(n - 1, 1000)
    rho_sum = 0.0
    for lag in range(1, max_lag + 1):
        rho = float(x[:-lag] @ x[lag:]) / denom
        if rho < 0.05:
            break
        rho_sum += rho
    return float(n / (1.0 + 2.0 * rho_sum))
