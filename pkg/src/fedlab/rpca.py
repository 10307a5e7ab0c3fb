"""Robust PCA (principal component pursuit) via the method of multipliers.

Splits a matrix M into a low-rank part L and a sparse part S by alternating
the nuclear-norm prox (singular value thresholding), the l1 prox (elementwise
shrinkage), and a dual ascent step:

    L <- svt(M - S + rho*Y, rho)
    S <- soft_threshold(M - L + rho*Y, rho*lam)
    Y <- Y + mu*(M - L - S)

with rho = 1/mu, stopping once ||M - L - S||_F <= tol * ||M||_F. The update
order is normative; reordering changes the fixed points.

Default hyperparameters are the standard recommendations:
lam = 1/sqrt(max(d1, d2)) and mu = d1*d2 / (4*||M||_1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .linalg import as_matrix, frobenius_norm, l1_norm, soft_threshold, svt

__all__ = ["RPCAConfig", "RPCADecomposition", "default_lambda", "default_mu", "robust_pca"]


@dataclass(frozen=True)
class RPCAConfig:
    """Solver knobs; ``mu``/``lam`` default to the input-dependent formulas."""

    mu: float | None = None
    lam: float | None = None
    tol: float = 1e-7
    max_iter: int = 1000

    def __post_init__(self):
        if self.mu is not None and not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.lam is not None and not self.lam > 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass(frozen=True)
class RPCADecomposition:
    low_rank: np.ndarray
    sparse: np.ndarray
    iterations: int
    residual: float
    converged: bool


def default_lambda(rows: int, cols: int) -> float:
    """Sparsity weight 1/sqrt(max(d1, d2))."""
    if rows < 1 or cols < 1:
        raise ValueError(f"dimensions must be positive, got {rows}x{cols}")
    return 1.0 / math.sqrt(max(rows, cols))


def default_mu(m: np.ndarray) -> float:
    """Penalty parameter d1*d2 / (4*||M||_1); undefined for an all-zero matrix."""
    m = as_matrix(m, "M")
    denom = 4.0 * l1_norm(m)
    if denom == 0.0:
        raise ZeroDivisionError("default mu is undefined for an all-zero matrix")
    return m.size / denom


def robust_pca(m: np.ndarray, config: RPCAConfig | None = None) -> RPCADecomposition:
    """Decompose *m* into low-rank plus sparse parts.

    An all-zero input short-circuits to the trivial decomposition (the
    default mu would divide by zero). Hitting ``max_iter`` without meeting
    the tolerance is not an error: the last iterates are returned with
    ``converged=False`` and still satisfy L + S ~ M approximately.
    """
    m = as_matrix(m, "M")
    cfg = config if config is not None else RPCAConfig()
    m_norm = frobenius_norm(m)
    if m_norm == 0.0:
        zero = np.zeros_like(m)
        return RPCADecomposition(zero, zero.copy(), 0, 0.0, True)

    mu = cfg.mu if cfg.mu is not None else default_mu(m)
    lam = cfg.lam if cfg.lam is not None else default_lambda(*m.shape)
    rho = 1.0 / mu

    sparse = np.zeros_like(m)
    dual = np.zeros_like(m)
    low_rank = np.zeros_like(m)
    residual = m_norm
    iterations = 0
    converged = False
    for it in range(1, cfg.max_iter + 1):
        try:
            low_rank = svt(m - sparse + rho * dual, rho)
        except NumericError as exc:
            raise NumericError(f"iteration {it}: {exc} (shape {m.shape})") from exc
        sparse = soft_threshold(m - low_rank + rho * dual, rho * lam)
        gap = m - low_rank - sparse
        dual = dual + mu * gap
        residual = frobenius_norm(gap)
        iterations = it
        if not np.isfinite(residual):
            raise NumericError(f"non-finite iterate at iteration {it} (shape {m.shape})")
        if residual <= cfg.tol * m_norm:
            converged = True
            break
    return RPCADecomposition(low_rank, sparse, iterations, residual, converged)
