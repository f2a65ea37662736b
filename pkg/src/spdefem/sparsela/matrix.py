"""Canonical compressed sparse row matrices and basic products."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

import numpy as np
import scipy.io
import scipy.sparse as sp

SparseMatrix = sp.csr_matrix


def canonical(m) -> sp.csr_matrix:
    """Return ``m`` as a CSR matrix with sorted indices and no duplicates."""
    out = sp.csr_matrix(m, dtype=np.float64, copy=False)
    if not out.has_canonical_format:
        out = out.copy()
        out.sum_duplicates()
        out.sort_indices()
    return out


def from_triplets(
    entries: Iterable[tuple[int, int, float]] | tuple[np.ndarray, np.ndarray, np.ndarray],
    shape: tuple[int, int],
) -> sp.csr_matrix:
    """Build a CSR matrix from (row, col, value) triplets.

    Parameters
    ----------
    entries : iterable of triplets, or a tuple ``(rows, cols, values)`` of arrays
        Duplicate positions are summed.
    shape : (int, int)
        Matrix dimensions.

    Raises
    ------
    IndexError
        If any index lies outside ``shape``.
    """
    if isinstance(entries, tuple) and len(entries) == 3 and isinstance(entries[0], np.ndarray):
        rows, cols, vals = (np.asarray(a) for a in entries)
    else:
        triplets = list(entries)
        if triplets:
            rows, cols, vals = (np.asarray(a) for a in zip(*triplets))
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
            vals = np.zeros(0)
    rows = rows.astype(np.int64, copy=False)
    cols = cols.astype(np.int64, copy=False)
    vals = vals.astype(np.float64, copy=False)
    nr, nc = shape
    if rows.size:
        bad = (rows < 0) | (rows >= nr) | (cols < 0) | (cols >= nc)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise IndexError(
                f"triplet {k} at ({rows[k]}, {cols[k]}) outside shape {shape}"
            )
    m = sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


def spmv(m: sp.csr_matrix, v: np.ndarray) -> np.ndarray:
    """Sparse matrix-vector product with a dimension check."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != m.shape[1]:
        raise ValueError(f"vector length {v.shape[0]} does not match {m.shape[1]} columns")
    return m @ v


def spgemm(a: sp.csr_matrix, b: sp.csr_matrix) -> sp.csr_matrix:
    """Sparse matrix-matrix product in canonical storage."""
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    return canonical(a @ b)


def symmetrize(m) -> sp.csr_matrix:
    """Return ``(m + m.T) / 2`` in canonical storage."""
    return canonical((m + m.T) * 0.5)


def asymmetry(m) -> float:
    """Relative asymmetry ``max|m - m.T| / max|m|``."""
    m = sp.csr_matrix(m)
    scale = abs(m).max() if m.nnz else 0.0
    if scale == 0.0:
        return 0.0
    diff = m - m.T
    return float(abs(diff).max() / scale) if diff.nnz else 0.0


def diag_matrix(values: np.ndarray) -> sp.csr_matrix:
    return sp.diags(np.asarray(values, dtype=np.float64), format="csr")


def write_matrix_market(path: str | Path, m) -> None:
    """Dump ``m`` in Matrix Market coordinate format (always ``general`` symmetry)."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(m), symmetry="general")
