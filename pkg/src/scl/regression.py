"""Least-squares projection on polynomial bases (conditional expectations)."""

from __future__ import annotations

import itertools

import numpy as np

from .errors import BasisError


class PolynomialBasis:
    """Orthonormalised polynomial design built from cross-sectional features.

    Features are standardised, columns with no spread across paths are
    dropped, and all monomials up to ``degree`` are formed. The thin QR
    factor ``q`` spans the design; projections are ``q q' y``.
    """

    def __init__(self, features: np.ndarray, degree: int, rcond: float = 1e-10):
        features = np.asarray(features, dtype=float)
        if features.ndim == 1:
            features = features[:, None]
        mu = features.mean(axis=0)
        sd = features.std(axis=0)
        keep = sd > 1e-12 * (1.0 + np.abs(mu))
        z = (features[:, keep] - mu[keep]) / sd[keep]
        cols = [np.ones(features.shape[0])]
        for d in range(1, degree + 1):
            for combo in itertools.combinations_with_replacement(range(z.shape[1]), d):
                cols.append(np.prod(z[:, combo], axis=1))
        X = np.stack(cols, axis=1)
        if X.shape[1] > X.shape[0]:
            raise BasisError(f"{X.shape[1]} basis functions but only {X.shape[0]} paths")
        q, r = np.linalg.qr(X)
        diag = np.abs(np.diag(r))
        if diag.min() < rcond * diag.max():
            raise BasisError(f"regression design with {X.shape[1]} columns is rank-deficient; "
                             f"reduce the polynomial degree (currently {degree})")
        self.q = q
        self.columns = X.shape[1]

    def coefficients(self, y: np.ndarray) -> np.ndarray:
        """Coefficients of the projection in the orthonormal basis, ``(K, ...)``."""
        flat = y.reshape(y.shape[0], -1)
        return (self.q.T @ flat).reshape((self.columns,) + y.shape[1:])

    def evaluate(self, coef: np.ndarray) -> np.ndarray:
        flat = coef.reshape(coef.shape[0], -1)
        return (self.q @ flat).reshape((self.q.shape[0],) + coef.shape[1:])

    def project(self, y: np.ndarray) -> np.ndarray:
        return self.evaluate(self.coefficients(y))
