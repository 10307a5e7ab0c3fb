"""Server-side aggregation strategies.

All strategies operate on the stacked representation: per layer, the A- and
B-deltas of the M clients are vectorized column-wise into matrices of shape
(r*d_in) x M and (d_out*r) x M. FedAvg is a column mean; scaled averaging
multiplies that mean by beta; TIES trims, elects signs, and merges; fedrpca
splits each stack into a low-rank part (averaged as-is, common signal) and a
sparse part (averaged and scaled by beta, client-specific signal).

The adaptive beta heuristic is beta = 1/E clamped to [1, beta_max], where
E = ||S @ 1|| / ||M @ 1|| measures how much of the summed update lives in
the sparse part.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import RPCARecord
from .linalg import column_sum, unvec, vec
from .rpca import RPCAConfig, robust_pca

__all__ = [
    "AGGREGATOR_KINDS",
    "AggregatorSpec",
    "LayerStack",
    "stack_updates",
    "aggregate_fedavg",
    "aggregate_scaled",
    "aggregate_ties",
    "aggregate_fedrpca",
    "sparse_energy",
    "adaptive_beta",
    "aggregate",
]

logger = logging.getLogger(__name__)

AGGREGATOR_KINDS = ("fedavg", "scaled", "ties", "fedrpca")


@dataclass(frozen=True)
class AggregatorSpec:
    """Which strategy to run and its parameters.

    ``beta`` is the scaling factor for ``scaled`` and for fedrpca's fixed
    mode; ``keep_fraction`` is the fraction of largest-magnitude entries TIES
    keeps per client; fedrpca's ``beta_mode`` is ``"fixed"`` or ``"adaptive"``
    (per-matrix 1/E, clamped to [1, beta_max]).
    """

    kind: str = "fedavg"
    beta: float = 2.0
    keep_fraction: float = 0.1
    beta_mode: str = "adaptive"
    beta_max: float = 10.0
    rpca: RPCAConfig = field(default_factory=RPCAConfig)

    def __post_init__(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise ValueError(
                f"unknown aggregator {self.kind!r}; valid kinds: {', '.join(AGGREGATOR_KINDS)}"
            )
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ValueError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")
        if self.beta_mode not in ("fixed", "adaptive"):
            raise ValueError(f"beta_mode must be 'fixed' or 'adaptive', got {self.beta_mode!r}")
        if not self.beta_max >= 1.0:
            raise ValueError(f"beta_max must be >= 1, got {self.beta_max}")


@dataclass(frozen=True)
class LayerStack:
    """Vectorized client deltas for one layer, one column per client."""

    m_a: np.ndarray
    m_b: np.ndarray
    a_shape: tuple[int, int]
    b_shape: tuple[int, int]


def stack_updates(updates) -> list[LayerStack]:
    """Column-stack vec(deltaA) / vec(deltaB) per layer, in client order."""
    if not updates:
        raise ValueError("need at least one client update")
    first = updates[0].deltas
    stacks = []
    for k, (d_a0, d_b0) in enumerate(first):
        for u in updates[1:]:
            if u.deltas[k][0].shape != d_a0.shape or u.deltas[k][1].shape != d_b0.shape:
                raise ValueError(
                    f"client {u.client_id} layer {k} shape mismatch: "
                    f"{u.deltas[k][0].shape}/{u.deltas[k][1].shape} vs "
                    f"{d_a0.shape}/{d_b0.shape}"
                )
        m_a = np.column_stack([vec(u.deltas[k][0]) for u in updates])
        m_b = np.column_stack([vec(u.deltas[k][1]) for u in updates])
        stacks.append(LayerStack(m_a, m_b, d_a0.shape, d_b0.shape))
    return stacks


def _mean_columns(m: np.ndarray) -> np.ndarray:
    return m.sum(axis=1) / m.shape[1]


def aggregate_fedavg(updates):
    """Plain elementwise mean of the client deltas."""
    out = []
    for st in stack_updates(updates):
        out.append((unvec(_mean_columns(st.m_a), *st.a_shape),
                    unvec(_mean_columns(st.m_b), *st.b_shape)))
    return out


def aggregate_scaled(updates, beta: float):
    """Task-arithmetic style scaled averaging: beta times the plain mean."""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    return [(beta * d_a, beta * d_b) for d_a, d_b in aggregate_fedavg(updates)]


# ---------------------------------------------------------------------------
# TIES: trim, elect sign, merge


def _trim_columns(m: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Zero all but the ceil(s*n) largest-magnitude entries of each column.

    Magnitude ties keep the lower index (stable sort on the negated
    absolute values).
    """
    n = m.shape[0]
    k = math.ceil(keep_fraction * n)
    out = np.zeros_like(m)
    for j in range(m.shape[1]):
        keep = np.argsort(-np.abs(m[:, j]), kind="stable")[:k]
        out[keep, j] = m[keep, j]
    return out


def _ties_merge_columns(m: np.ndarray, keep_fraction: float) -> np.ndarray:
    trimmed = _trim_columns(m, keep_fraction)
    totals = trimmed.sum(axis=1)
    elected = np.where(totals >= 0.0, 1.0, -1.0)
    match = np.sign(trimmed) == elected[:, None]
    sums = np.where(match, trimmed, 0.0).sum(axis=1)
    counts = match.sum(axis=1)
    merged = np.zeros_like(sums)
    np.divide(sums, counts, out=merged, where=counts > 0)
    return merged


def aggregate_ties(updates, keep_fraction: float):
    """Per coordinate: keep sign-aligned trimmed values only, then average them."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    out = []
    for st in stack_updates(updates):
        out.append((unvec(_ties_merge_columns(st.m_a, keep_fraction), *st.a_shape),
                    unvec(_ties_merge_columns(st.m_b, keep_fraction), *st.b_shape)))
    return out


# ---------------------------------------------------------------------------
# fedrpca


def sparse_energy(m_stack: np.ndarray, sparse: np.ndarray) -> float:
    """Relative mass of the sparse part: ||S @ 1|| / ||M @ 1||."""
    if m_stack.shape != sparse.shape:
        raise ValueError(f"shape mismatch: {m_stack.shape} vs {sparse.shape}")
    denom = float(np.linalg.norm(column_sum(m_stack)))
    if denom == 0.0:
        raise ValueError("degenerate round: summed update is zero")
    return float(np.linalg.norm(column_sum(sparse))) / denom


def adaptive_beta(energy: float, beta_max: float) -> float:
    """clamp(1/E, 1, beta_max); E = 0 falls back to 1 (nothing to amplify)."""
    if energy < 0:
        raise ValueError(f"energy must be nonnegative, got {energy}")
    if energy == 0.0:
        logger.warning("degenerate round: zero sparse energy, using beta=1")
        return 1.0
    return min(max(1.0 / energy, 1.0), beta_max)


def _fedrpca_matrix(m_stack, shape, spec, layer_idx, matrix_name, records):
    decomposition = robust_pca(m_stack, spec.rpca)
    if not decomposition.converged:
        logger.warning(
            "rpca did not converge for layer %d matrix %s (residual %.3e after %d iterations)",
            layer_idx, matrix_name, decomposition.residual, decomposition.iterations,
        )
    try:
        energy = sparse_energy(m_stack, decomposition.sparse)
        degenerate = False
    except ValueError:
        energy = 0.0
        degenerate = True
        logger.warning("degenerate round for layer %d matrix %s: zero summed update",
                       layer_idx, matrix_name)
    if spec.beta_mode == "fixed":
        beta = spec.beta
    else:
        beta = 1.0 if degenerate else adaptive_beta(energy, spec.beta_max)
    merged = _mean_columns(decomposition.low_rank) + beta * _mean_columns(decomposition.sparse)
    if records is not None:
        records.append(RPCARecord(
            layer=layer_idx,
            matrix=matrix_name,
            energy=energy,
            beta=beta,
            iterations=decomposition.iterations,
            residual=decomposition.residual,
            converged=decomposition.converged,
        ))
    return unvec(merged, *shape)


def aggregate_fedrpca(updates, spec: AggregatorSpec, records=None):
    """Robust-PCA split aggregation: mean(L columns) + beta * mean(S columns).

    The decomposition runs independently on each layer's A-stack and B-stack;
    in adaptive mode each matrix gets its own beta. Per-matrix energy, beta,
    iteration count, residual and convergence flag are appended to *records*
    when a list is supplied.
    """
    out = []
    for layer_idx, st in enumerate(stack_updates(updates)):
        d_a = _fedrpca_matrix(st.m_a, st.a_shape, spec, layer_idx, "A", records)
        d_b = _fedrpca_matrix(st.m_b, st.b_shape, spec, layer_idx, "B", records)
        out.append((d_a, d_b))
    return out


def aggregate(updates, spec: AggregatorSpec, records=None):
    """Dispatch on ``spec.kind``; the single entry point used by the round loop."""
    if spec.kind == "fedavg":
        return aggregate_fedavg(updates)
    if spec.kind == "scaled":
        return aggregate_scaled(updates, spec.beta)
    if spec.kind == "ties":
        return aggregate_ties(updates, spec.keep_fraction)
    if spec.kind == "fedrpca":
        return aggregate_fedrpca(updates, spec, records)
    raise ValueError(f"unknown aggregator {spec.kind!r}")
