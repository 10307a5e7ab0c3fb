"""Measurement surface: similarity matrices, rounds-to-target, metrics files.

The metrics stream is two CSV files: ``metrics.csv`` with one row per round
(``round,aggregator,test_accuracy,test_loss,wall_seconds``) and a sidecar
``rpca_trace.csv`` holding the per-layer-per-matrix decomposition records
(``round,layer,matrix,E,beta,rpca_iterations,rpca_residual,converged``),
present only for rounds aggregated with fedrpca. Floats are written with 17
significant digits so the round-trip is lossless.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ParseError
from .linalg import vec

__all__ = [
    "RPCARecord",
    "RoundMetrics",
    "flatten_update",
    "column_cosine_similarity",
    "cosine_similarity_matrix",
    "mean_offdiagonal",
    "rounds_to_target",
    "write_metrics",
    "read_metrics",
    "TRACE_FILENAME",
]

logger = logging.getLogger(__name__)

TRACE_FILENAME = "rpca_trace.csv"

_METRICS_HEADER = ["round", "aggregator", "test_accuracy", "test_loss", "wall_seconds"]
_TRACE_HEADER = ["round", "layer", "matrix", "E", "beta", "rpca_iterations",
                 "rpca_residual", "converged"]


@dataclass(frozen=True)
class RPCARecord:
    """One decomposition's trace: layer index, matrix kind 'A' or 'B'."""

    layer: int
    matrix: str
    energy: float
    beta: float
    iterations: int
    residual: float
    converged: bool


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    aggregator: str
    test_accuracy: float
    test_loss: float
    wall_seconds: float = 0.0
    rpca: tuple[RPCARecord, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.test_accuracy <= 1.0:
            raise ValueError(f"accuracy must lie in [0, 1], got {self.test_accuracy}")


# ---------------------------------------------------------------------------
# cosine similarity


def flatten_update(update) -> np.ndarray:
    """Concatenate vec(deltaA), vec(deltaB) over layers in fixed layer order."""
    pieces = []
    for d_a, d_b in update.deltas:
        pieces.append(vec(d_a))
        pieces.append(vec(d_b))
    return np.concatenate(pieces)


def column_cosine_similarity(columns: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity of the columns of an (n x M) array.

    Zero columns get similarity 0 against everything (diagonal stays 1 by
    convention) and are logged as degenerate.
    """
    columns = np.asarray(columns, dtype=np.float64)
    if columns.ndim != 2:
        raise ValueError(f"expected a 2-D stack of columns, got shape {columns.shape}")
    norms = np.linalg.norm(columns, axis=0)
    zero = norms == 0.0
    if zero.any():
        logger.warning("%d zero-norm update(s) in similarity computation", int(zero.sum()))
    safe = np.where(zero, 1.0, norms)
    unit = columns / safe
    sim = np.clip(unit.T @ unit, -1.0, 1.0)
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    np.fill_diagonal(sim, 1.0)
    return sim


def cosine_similarity_matrix(updates) -> np.ndarray:
    """M x M cosine similarity of whole flattened client updates."""
    if not updates:
        raise ValueError("need at least one update")
    return column_cosine_similarity(np.column_stack([flatten_update(u) for u in updates]))


def mean_offdiagonal(c: np.ndarray) -> float:
    """Mean of the off-diagonal entries; 0 for a 1x1 matrix by convention."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {c.shape}")
    m = c.shape[0]
    if m == 1:
        return 0.0
    return float((c.sum() - np.trace(c)) / (m * (m - 1)))


# ---------------------------------------------------------------------------
# accuracy series summaries


def rounds_to_target(series, target_accuracy: float):
    """Smallest round index reaching the target accuracy, or None."""
    if not 0.0 <= target_accuracy <= 1.0:
        raise ValueError(f"target accuracy must lie in [0, 1], got {target_accuracy}")
    for record in series:
        if record.test_accuracy >= target_accuracy:
            return record.round
    return None


# ---------------------------------------------------------------------------
# CSV round-trip


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_metrics(series, path) -> None:
    """Write metrics.csv at *path* and the rpca_trace.csv sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_METRICS_HEADER)
        for record in series:
            writer.writerow([
                record.round,
                record.aggregator,
                _fmt(record.test_accuracy),
                _fmt(record.test_loss),
                _fmt(record.wall_seconds),
            ])
    with (path.parent / TRACE_FILENAME).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_TRACE_HEADER)
        for record in series:
            for entry in record.rpca:
                writer.writerow([
                    record.round,
                    entry.layer,
                    entry.matrix,
                    _fmt(entry.energy),
                    _fmt(entry.beta),
                    entry.iterations,
                    _fmt(entry.residual),
                    "true" if entry.converged else "false",
                ])


def _parse_row(row, header, path, lineno, casts):
    if len(row) != len(header):
        raise ParseError(f"expected {len(header)} columns, got {len(row)}",
                         path=path, line=lineno)
    try:
        return [cast(cell) for cast, cell in zip(casts, row)]
    except ValueError as exc:
        raise ParseError(str(exc), path=path, line=lineno) from None


def _parse_bool(cell: str) -> bool:
    if cell == "true":
        return True
    if cell == "false":
        return False
    raise ValueError(f"expected 'true' or 'false', got {cell!r}")


def read_metrics(path) -> list[RoundMetrics]:
    """Inverse of :func:`write_metrics`; reads the sidecar when present."""
    path = Path(path)
    series = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _METRICS_HEADER:
            raise ParseError(f"bad header {header}", path=path, line=1)
        for lineno, row in enumerate(reader, start=2):
            rnd, agg, acc, loss, wall = _parse_row(
                row, _METRICS_HEADER, path, lineno, [int, str, float, float, float]
            )
            series.append(RoundMetrics(rnd, agg, acc, loss, wall))
    trace_path = path.parent / TRACE_FILENAME
    if trace_path.exists():
        by_round: dict[int, list[RPCARecord]] = {}
        with trace_path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != _TRACE_HEADER:
                raise ParseError(f"bad header {header}", path=trace_path, line=1)
            for lineno, row in enumerate(reader, start=2):
                rnd, layer, matrix, energy, beta, iters, residual, conv = _parse_row(
                    row, _TRACE_HEADER, trace_path, lineno,
                    [int, int, str, float, float, int, float, _parse_bool],
                )
                by_round.setdefault(rnd, []).append(
                    RPCARecord(layer, matrix, energy, beta, iters, residual, conv)
                )
        series = [
            replace(record, rpca=tuple(by_round.get(record.round, ())))
            for record in series
        ]
    return series
