"""Path-space norms and time quadrature used by the diagnostics."""

from __future__ import annotations

import numpy as np


def pointwise_norm(arr: np.ndarray, trailing: int) -> np.ndarray:
    """Euclidean (Frobenius) norm over the last ``trailing`` axes."""
    if trailing == 0:
        return np.abs(arr)
    axes = tuple(range(arr.ndim - trailing, arr.ndim))
    return np.sqrt(np.sum(arr**2, axis=axes))


def time_integral(values: np.ndarray, dt: float, axis: int = 1) -> np.ndarray:
    """Trapezoid rule on a uniform grid along ``axis``."""
    values = np.moveaxis(values, axis, 0)
    return dt * (0.5 * values[0] + values[1:-1].sum(axis=0) + 0.5 * values[-1])


def sup_norm(paths: np.ndarray, kappa: float = 2.0, trailing: int = 1) -> float:
    """``(E sup_t |phi(t)|^kappa)^(1/kappa)`` for samples of shape ``(P, K, ...)``."""
    mag = pointwise_norm(paths, trailing)
    return float(np.mean(np.max(mag, axis=1) ** kappa) ** (1.0 / kappa))


def integral_norm(paths: np.ndarray, dt: float, alpha: float = 2.0, beta: float = 2.0,
                  trailing: int = 1) -> float:
    """``[E (int |phi|^alpha dt)^(beta/alpha)]^(1/beta)`` for samples ``(P, K, ...)``."""
    mag = pointwise_norm(paths, trailing)
    inner = time_integral(mag**alpha, dt, axis=1)
    return float(np.mean(inner ** (beta / alpha)) ** (1.0 / beta))


def mean_and_stderr(samples: np.ndarray) -> tuple[float, float]:
    samples = np.asarray(samples, dtype=float)
    P = samples.shape[0]
    mean = float(np.mean(samples))
    err = float(np.std(samples, ddof=1) / np.sqrt(P)) if P > 1 else float("nan")
    return mean, err
