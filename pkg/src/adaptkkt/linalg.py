"""Sparse direct solves for the indefinite KKT Hessian systems.

The Hessian of the Lagrangian is symmetric but indefinite (zero adjoint
block), so Cholesky is not an option; we use SuperLU with partial pivoting
after a fill-reducing ordering.  One factorization serves several
right-hand sides (primal Newton step and dual solve share it).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

PIVOT_RTOL = 1e-14


class SingularMatrix(RuntimeError):
    def __init__(self, row: int, message: str = ""):
        self.row = row
        super().__init__(message or f"pivot below tolerance in row {row}")


class DimensionMismatch(ValueError):
    pass


@dataclass
class FactorizationCounter:
    """Counts factorizations and solves, used to compare algorithm costs."""

    factorizations: int = 0
    solves: int = 0

    def reset(self) -> None:
        self.factorizations = 0
        self.solves = 0


@dataclass
class Factorization:
    n: int
    perm: np.ndarray
    lu: object = field(repr=False)
    ordering: str = "colamd"

    def solve(self, b: np.ndarray, counter: FactorizationCounter | None = None) -> np.ndarray:
        return solve(self, b, counter)


def _dump_matrix(A: sp.spmatrix) -> None:
    path = os.environ.get("ADAPTKKT_DUMP_MATRIX")
    if path:
        scipy.io.mmwrite(path, sp.coo_matrix(A))


def rcm_permutation(A: sp.spmatrix) -> np.ndarray:
    """Reverse Cuthill-McKee order of the symmetrized sparsity pattern."""
    pattern = sp.csr_matrix(abs(A) + abs(A).T)
    return np.asarray(csgraph.reverse_cuthill_mckee(pattern, symmetric_mode=True))


def factorize(
    A: sp.spmatrix,
    ordering: str = "colamd",
    counter: FactorizationCounter | None = None,
) -> Factorization:
    """LU-factorize a square sparse matrix with partial pivoting.

    ``ordering`` is ``"colamd"`` (SuperLU's column ordering) or ``"rcm"``
    (symmetric reverse Cuthill-McKee applied before a natural-order LU).
    Raises SingularMatrix when a pivot falls below 1e-14 * max|A|.
    """
    A = sp.csc_matrix(A, dtype=float)
    n, m = A.shape
    if n != m:
        raise DimensionMismatch(f"matrix is {n}x{m}, expected square")
    _dump_matrix(A)
    if ordering == "rcm":
        perm = rcm_permutation(A)
        Ap = A[perm][:, perm].tocsc()
        permc = "NATURAL"
    elif ordering == "colamd":
        perm = np.arange(n)
        Ap = A
        permc = "COLAMD"
    else:
        raise ValueError(f"unknown ordering {ordering!r}")

    scale = abs(A).max() if A.nnz else 0.0
    if scale == 0.0:
        raise SingularMatrix(0, "zero matrix")
    try:
        lu = spla.splu(Ap, permc_spec=permc, options={"SymmetricMode": False})
    except RuntimeError as exc:
        raise SingularMatrix(-1, str(exc)) from exc

    udiag = np.abs(lu.U.diagonal())
    bad = np.flatnonzero(udiag < PIVOT_RTOL * scale)
    if bad.size:
        row = int(perm[lu.perm_c[bad[0]]])
        raise SingularMatrix(row)
    if counter is not None:
        counter.factorizations += 1
    return Factorization(n=n, perm=perm, lu=lu, ordering=ordering)


def solve(
    F: Factorization, b: np.ndarray, counter: FactorizationCounter | None = None
) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    if b.shape[0] != F.n:
        raise DimensionMismatch(f"rhs has length {b.shape[0]}, matrix has {F.n} rows")
    if counter is not None:
        counter.solves += 1
    bp = b[F.perm]
    xp = F.lu.solve(bp)
    x = np.empty_like(xp)
    x[F.perm] = xp
    return x
