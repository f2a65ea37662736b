"""Sparse LLᵀ factorization with a fill-reducing permutation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .matrix import asymmetry, canonical

SYMMETRY_TOL = 1e-12


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a non-positive pivot appears during factorization."""

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(message or f"non-positive pivot at permuted index {pivot}")


@dataclass(frozen=True)
class Symbolic:
    """Ordering and factor structure, reusable for matrices with the same pattern."""

    perm: np.ndarray
    parent: np.ndarray
    colptr: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray

    def matches(self, m: sp.csr_matrix) -> bool:
        return (
            m.shape[0] == self.perm.size
            and np.array_equal(m.indptr, self.indptr)
            and np.array_equal(m.indices, self.indices)
        )


@dataclass(frozen=True)
class CholeskyFactor:
    """``A[perm][:, perm] = L Lᵀ`` with ``L`` lower triangular (stored by columns).

    Attributes
    ----------
    perm : ndarray
        Fill-reducing permutation; row ``i`` of the permuted matrix is row
        ``perm[i]`` of the input.
    colptr, rowind, values : ndarray
        Compressed-column storage of ``L``; the diagonal entry leads each column.
    symbolic : Symbolic
        Structure that can be handed back to :func:`cholesky` for refactorization.
    """

    perm: np.ndarray
    colptr: np.ndarray
    rowind: np.ndarray
    values: np.ndarray
    symbolic: Symbolic

    @property
    def n(self) -> int:
        return self.perm.size

    @property
    def diagonal(self) -> np.ndarray:
        return self.values[self.colptr[:-1]]

    @property
    def L(self) -> sp.csc_matrix:
        return sp.csc_matrix((self.values, self.rowind, self.colptr), shape=(self.n, self.n))

    def _rhs(self, rhs) -> tuple[np.ndarray, bool]:
        b = np.asarray(rhs, dtype=np.float64)
        vector = b.ndim == 1
        if vector:
            b = b[:, None]
        if b.ndim != 2 or b.shape[0] != self.n:
            raise ValueError(f"right-hand side has {b.shape[0]} rows, factor has {self.n}")
        return b, vector

    def solve(self, rhs) -> np.ndarray:
        """Solve ``A x = rhs`` for one or more columns."""
        b, vector = self._rhs(rhs)
        work = np.asfortranarray(b[self.perm])
        _kernels.forward(self.colptr, self.rowind, self.values, work)
        _kernels.backward(self.colptr, self.rowind, self.values, work)
        x = np.empty_like(work)
        x[self.perm] = work
        return x[:, 0] if vector else x

    def solve_lt(self, rhs) -> np.ndarray:
        """Apply the inverse transposed factor: ``x = Pᵀ L⁻ᵀ z``.

        With ``z`` standard normal the result has covariance ``A⁻¹``.
        """
        b, vector = self._rhs(rhs)
        work = np.asfortranarray(b.copy())
        _kernels.backward(self.colptr, self.rowind, self.values, work)
        x = np.empty_like(work)
        x[self.perm] = work
        return x[:, 0] if vector else x

    def logdet(self) -> float:
        return float(2.0 * np.sum(np.log(self.diagonal)))


def symbolic(m: sp.csr_matrix) -> Symbolic:
    """Compute the ordering, elimination tree and column pointers for ``m``."""
    n = m.shape[0]
    indptr = m.indptr.astype(np.int64)
    indices = m.indices.astype(np.int64)
    perm = _kernels.minimum_degree(indptr, indices, n)
    c = canonical(m[perm][:, perm])
    cp = c.indptr.astype(np.int64)
    ci = c.indices.astype(np.int64)
    parent = _kernels.etree(cp, ci, n)
    counts = _kernels.column_counts(cp, ci, parent, n)
    colptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=colptr[1:])
    return Symbolic(perm, parent, colptr, m.indptr.copy(), m.indices.copy())


def cholesky(m, analysis: Symbolic | None = None, check_symmetry: bool = True) -> CholeskyFactor:
    """Factorize a sparse symmetric positive definite matrix.

    Parameters
    ----------
    m : sparse matrix
        Square symmetric matrix.
    analysis : Symbolic, optional
        Structure from a previous factorization; reused when the sparsity
        pattern is identical, recomputed otherwise.
    check_symmetry : bool
        Reject inputs whose relative asymmetry exceeds 1e-12.

    Raises
    ------
    ValueError
        If ``m`` is not square or not symmetric.
    NotPositiveDefiniteError
        If a pivot is not strictly positive.
    """
    m = canonical(m)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"matrix must be square, got {m.shape}")
    if check_symmetry:
        asym = asymmetry(m)
        if asym > SYMMETRY_TOL:
            raise ValueError(f"matrix is not symmetric (relative asymmetry {asym:.3e})")
    n = m.shape[0]
    if analysis is None or not analysis.matches(m):
        analysis = symbolic(m)
    c = canonical(m[analysis.perm][:, analysis.perm])
    li, lx, status = _kernels.numeric(
        c.indptr.astype(np.int64), c.indices.astype(np.int64), c.data,
        analysis.parent, analysis.colptr, n,
    )
    if status >= 0:
        raise NotPositiveDefiniteError(int(status))
    return CholeskyFactor(analysis.perm, analysis.colptr, li, lx, analysis)


def solve(f: CholeskyFactor, rhs) -> np.ndarray:
    """Solve ``A x = rhs`` with a factor of ``A``."""
    return f.solve(rhs)


def logdet(f: CholeskyFactor) -> float:
    """Log-determinant of the factorized matrix."""
    return f.logdet()
