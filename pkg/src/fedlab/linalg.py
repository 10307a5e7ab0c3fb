"""Dense matrix primitives: proximal operators, vectorization, norms, text I/O.

Matrices are plain 2-D float64 numpy arrays. Elementwise arithmetic, matmul
and transposition are numpy's own operators (``+``, ``*``, ``@``, ``.T``);
this module adds the operators the decomposition pipeline is built on, the
validation applied at package boundaries, and the on-disk text format.

Vectorization is column-major throughout the package: ``vec`` stacks the
columns of a matrix top to bottom and ``unvec`` is its exact inverse. The
order is a global convention; nothing downstream depends on which order is
used as long as it is consistent.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .errors import NumericError, ParseError

__all__ = [
    "as_matrix",
    "soft_threshold",
    "svt",
    "vec",
    "unvec",
    "frobenius_norm",
    "l1_norm",
    "column_sum",
    "save_matrix",
    "load_matrix",
]


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce *x* to a finite 2-D float64 array, validating shape and entries."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"{name} must have positive dimensions, got {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError(f"{name} contains non-finite entries")
    return m


def soft_threshold(x: np.ndarray, t: float) -> np.ndarray:
    """Elementwise shrinkage ``sign(x) * max(|x| - t, 0)``.

    Proximal operator of ``t * ||.||_1``; a contraction for every t >= 0.
    """
    if t < 0:
        raise ValueError(f"threshold must be nonnegative, got {t}")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def svt(x: np.ndarray, t: float) -> np.ndarray:
    """Singular value thresholding: proximal operator of ``t * ||.||_*``.

    Computes a thin SVD ``x = U diag(s) V^T`` and rebuilds the matrix from
    the shrunk spectrum ``soft_threshold(s, t)``. The result has rank equal
    to the number of singular values strictly exceeding *t*.
    """
    if t < 0:
        raise ValueError(f"threshold must be nonnegative, got {t}")
    x = np.asarray(x, dtype=np.float64)
    try:
        u, s, vt = np.linalg.svd(x, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD failed to converge on matrix of shape {x.shape}") from exc
    return (u * soft_threshold(s, t)) @ vt


def vec(x: np.ndarray) -> np.ndarray:
    """Column-major vectorization: stacks the columns of *x* into a 1-D array."""
    return np.ravel(x, order="F")


def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Exact inverse of :func:`vec`: reshape a length ``rows*cols`` vector."""
    v = np.ravel(np.asarray(v, dtype=np.float64))
    if v.size != rows * cols:
        raise ValueError(f"cannot reshape length-{v.size} vector to {rows}x{cols}")
    return v.reshape((rows, cols), order="F")


def frobenius_norm(x: np.ndarray) -> float:
    return float(np.linalg.norm(x))


def l1_norm(x: np.ndarray) -> float:
    """Entrywise l1 norm (sum of absolute values)."""
    return float(np.abs(x).sum())


def column_sum(x: np.ndarray) -> np.ndarray:
    """Sum across columns, i.e. ``x @ 1``; returns a length-``rows`` vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"column_sum expects a 2-D array, got shape {x.shape}")
    return x.sum(axis=1)


def save_matrix(path, x: np.ndarray) -> None:
    """Write a matrix as text: ``<rows> <cols>`` header, then one line per row.

    Values carry 17 significant digits so float64 round-trips exactly.
    """
    m = as_matrix(x)
    lines = [f"{m.shape[0]} {m.shape[1]}"]
    for row in m:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_matrix(path) -> np.ndarray:
    """Read a matrix written by :func:`save_matrix` (any float notation accepted)."""
    path = Path(path)
    with path.open() as fh:
        header = fh.readline()
        if not header.strip():
            raise ParseError("missing header line", path=path, line=1)
        parts = header.split()
        if len(parts) != 2:
            raise ParseError(f"header must be '<rows> <cols>', got {header!r}", path=path, line=1)
        try:
            rows, cols = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(f"non-integer dimensions in header {header!r}", path=path, line=1) from None
        if rows < 1 or cols < 1:
            raise ParseError(f"dimensions must be positive, got {rows}x{cols}", path=path, line=1)
        out = np.empty((rows, cols), dtype=np.float64)
        for i in range(rows):
            line = fh.readline()
            if not line:
                raise ParseError(f"expected {rows} data rows, file ends after {i}", path=path, line=i + 1)
            fields = line.split()
            if len(fields) != cols:
                raise ParseError(f"expected {cols} values, got {len(fields)}", path=path, line=i + 2)
            try:
                out[i] = [float(f) for f in fields]
            except ValueError:
                raise ParseError("unparseable value", path=path, line=i + 2) from None
    if not np.isfinite(out).all():
        raise ParseError("matrix contains non-finite entries", path=path)
    return out
