"""Sparse matrix arithmetic and sparse Cholesky factorization."""

from .cholesky import CholeskyFactor, NotPositiveDefiniteError, Symbolic, cholesky, logdet, solve
from .matrix import (
    SparseMatrix,
    asymmetry,
    canonical,
    diag_matrix,
    from_triplets,
    spgemm,
    spmv,
    symmetrize,
    write_matrix_market,
)

__all__ = [
    "CholeskyFactor",
    "NotPositiveDefiniteError",
    "SparseMatrix",
    "Symbolic",
    "asymmetry",
    "canonical",
    "cholesky",
    "diag_matrix",
    "from_triplets",
    "logdet",
    "solve",
    "spgemm",
    "spmv",
    "symmetrize",
    "write_matrix_market",
]
