"""Minimal dense numerics: stable log-domain reductions, softmax, and
symmetric-positive-definite solves.

All arithmetic is float64; inputs are converted on entry. Every function here
is pure and safe for unrestricted parallel use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NumericError


def logsumexp(values) -> float:
    """log(sum(exp(values))), computed with the max-shift trick.

    Finite whenever the largest entry is finite, regardless of spread.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("logsumexp requires a non-empty 1-d vector")
    m = float(np.max(v))
    if not np.isfinite(m):
        return m
    return m + float(np.log(np.sum(np.exp(v - m))))


def row_logsumexp(matrix) -> np.ndarray:
    """Row-wise logsumexp of a 2-d array with finite entries."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] == 0:
        raise ValueError("row_logsumexp requires a 2-d array with non-empty rows")
    shift = np.max(m, axis=1, keepdims=True)
    return shift[:, 0] + np.log(np.sum(np.exp(m - shift), axis=1))


def softmax(values) -> np.ndarray:
    """Softmax of a vector; entries positive and summing to one."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("softmax requires a non-empty 1-d vector")
    e = np.exp(v - np.max(v))
    return e / np.sum(e)


def row_softmax(matrix) -> np.ndarray:
    """Row-wise softmax of a 2-d array."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] == 0:
        raise ValueError("row_softmax requires a 2-d array with non-empty rows")
    e = np.exp(m - np.max(m, axis=1, keepdims=True))
    return e / np.sum(e, axis=1, keepdims=True)


@dataclass(frozen=True)
class SpdFactor:
    """Cholesky factor of (matrix + ridge*I) for a symmetric PD matrix."""

    lower: np.ndarray
    ridge: float

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def solve(self, b) -> np.ndarray:
        """Solve (matrix + ridge*I) x = b; b is a vector or a stack of columns."""
        rhs = np.asarray(b, dtype=np.float64)
        if rhs.shape[0] != self.dim:
            raise ValueError(
                f"right-hand side has leading dimension {rhs.shape[0]}, expected {self.dim}"
            )
        y = solve_triangular(self.lower, rhs, lower=True)
        return solve_triangular(self.lower, y, lower=True, trans="T")

    def reconstruct(self) -> np.ndarray:
        """Return matrix + ridge*I, for round-trip checks."""
        return self.lower @ self.lower.T


def spd_factor(matrix, ridge: float = 0.0) -> SpdFactor:
    """Factor matrix + ridge*I; fails cleanly if the result is not PD."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
        raise NumericError(f"expected a non-empty square matrix, got shape {m.shape}")
    if ridge < 0:
        raise NumericError(f"ridge must be non-negative, got {ridge}")
    if float(np.max(np.abs(m - m.T))) > 1e-10:
        raise NumericError("matrix is asymmetric beyond 1e-10")
    sym = 0.5 * (m + m.T)  # kill roundoff asymmetry before factoring
    ridged = sym + ridge * np.eye(sym.shape[0])
    try:
        lower = np.linalg.cholesky(ridged)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"matrix is not positive definite after ridge {ridge}") from exc
    return SpdFactor(lower=lower, ridge=float(ridge))


def mahalanobis_sq(x, mu, factor: SpdFactor) -> float:
    """(x-mu)' (matrix + ridge*I)^{-1} (x-mu) via the factor; non-negative."""
    xv = np.asarray(x, dtype=np.float64)
    mv = np.asarray(mu, dtype=np.float64)
    if xv.ndim != 1 or xv.shape != mv.shape:
        raise ValueError(f"x and mu must be vectors of equal length, got {xv.shape} vs {mv.shape}")
    if xv.shape[0] != factor.dim:
        raise ValueError(f"vectors have dimension {xv.shape[0]}, factor has {factor.dim}")
    d = xv - mv
    return max(0.0, float(d @ factor.solve(d)))
