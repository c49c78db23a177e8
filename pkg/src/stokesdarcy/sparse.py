"""Sparse matrix storage, kernels and the direct LU baseline.

Every assembled operator in the package is a ``scipy.sparse.csr_matrix`` in
canonical form (sorted column indices, no duplicates).  Assembly goes through
:class:`CooBuilder`, which sums duplicate entries on finalize.

The direct solver wraps SuperLU with threshold row pivoting.  Columns are
preordered with COLAMD by default; ``ordering="natural"`` disables the
preordering and exposes the raw fill of the given numbering, which is only
affordable for small matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.sparse.linalg import splu

SparseMatrix = sp.csr_matrix

# dense fallback used only to name the failing row of a numerically singular matrix
_DENSE_DIAGNOSIS_LIMIT = 3000


class SingularMatrixError(ValueError):
    """Raised when a factorization meets a zero pivot."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class CooBuilder:
    """Coordinate-list accumulator; duplicates are summed by :meth:`tocsr`."""

    def __init__(self, n_rows, n_cols):
        self.shape = (int(n_rows), int(n_cols))
        self._rows = []
        self._cols = []
        self._vals = []

    def add(self, i, j, v):
        self._rows.append(i)
        self._cols.append(j)
        self._vals.append(v)

    def add_row(self, i, entries):
        """Add ``{column: value}`` entries to row ``i``."""
        for j, v in entries.items():
            self._rows.append(i)
            self._cols.append(j)
            self._vals.append(v)

    def tocsr(self) -> SparseMatrix:
        A = sp.coo_matrix(
            (np.asarray(self._vals, dtype=np.float64),
             (np.asarray(self._rows, dtype=np.int64), np.asarray(self._cols, dtype=np.int64))),
            shape=self.shape,
        ).tocsr()
        A.sum_duplicates()
        A.eliminate_zeros()
        A.sort_indices()
        return A


def as_csr(A) -> SparseMatrix:
    """Return ``A`` as a canonical float64 CSR matrix."""
    A = sp.csr_matrix(A, dtype=np.float64)
    A.sum_duplicates()
    A.sort_indices()
    return A


def check_csr(A: SparseMatrix):
    """Assert the CSR storage invariants; raises ``ValueError`` on violation."""
    n_rows = A.shape[0]
    offsets = A.indptr
    if offsets.shape[0] != n_rows + 1:
        raise ValueError("row_offsets must have length n_rows + 1")
    if np.any(np.diff(offsets) < 0):
        raise ValueError("row_offsets must be nondecreasing")
    if offsets[-1] != A.data.shape[0] or offsets[-1] != A.indices.shape[0]:
        raise ValueError("stored value count must equal row_offsets[n_rows]")
    for i in range(n_rows):
        cols = A.indices[offsets[i]:offsets[i + 1]]
        if cols.size and (np.any(np.diff(cols) <= 0) or cols[0] < 0 or cols[-1] >= A.shape[1]):
            raise ValueError(f"column indices of row {i} are not strictly increasing and in range")


def spmv(A: SparseMatrix, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != A.shape[1]:
        raise ValueError(f"dimension mismatch: matrix has {A.shape[1]} columns, vector has length {x.shape}")
    return A @ x


@dataclass(frozen=True)
class FillStats:
    n_rows: int
    nnz_matrix: int
    nnz_factors: int

    @property
    def entries_per_dof_matrix(self) -> float:
        return self.nnz_matrix / self.n_rows

    @property
    def entries_per_dof_factors(self) -> float:
        return self.nnz_factors / self.n_rows


@dataclass(frozen=True)
class LUFactorization:
    """``A[row_permutation][:, column_permutation] = L U`` with unit lower ``L``."""

    lower: SparseMatrix
    upper: SparseMatrix
    row_permutation: np.ndarray
    column_permutation: np.ndarray
    fill_stats: FillStats
    _superlu: object

    @property
    def shape(self):
        return self.upper.shape

    def solve(self, b):
        return lu_solve(self, b)


def _locate_singular_row(A):
    n = A.shape[0]
    match = maximum_bipartite_matching(A.tocsr(), perm_type="column")
    unmatched = np.flatnonzero(match < 0)
    if unmatched.size:
        return int(unmatched[0]), "structurally singular"
    if n <= _DENSE_DIAGNOSIS_LIMIT:
        P, _, U = scipy.linalg.lu(A.toarray())
        diag = np.abs(np.diag(U))
        scale = max(np.abs(U).max(), 1e-300)
        bad = np.flatnonzero(diag <= n * np.finfo(float).eps * scale)
        if bad.size:
            # P @ L @ U = A, so pivot position k carries row argmax(P[:, k])
            return int(np.argmax(P[:, bad[0]])), "numerically singular"
    return None, "numerically singular"


def lu_factor(A, pivot_threshold=0.1, ordering="colamd") -> LUFactorization:
    """Sparse LU with threshold partial pivoting.

    ``ordering`` selects the SuperLU column preordering (``"colamd"``,
    ``"natural"`` or ``"mmd_ata"``).  The natural ordering leaves
    ``column_permutation`` as the identity.
    """
    A = as_csr(A)
    n, m = A.shape
    if n != m:
        raise ValueError(f"lu_factor needs a square matrix, got {A.shape}")
    permc = {"natural": "NATURAL", "colamd": "COLAMD", "mmd_ata": "MMD_ATA"}[ordering.lower()]
    try:
        lu = splu(
            A.tocsc(),
            permc_spec=permc,
            diag_pivot_thresh=pivot_threshold,
            options={"Equil": False, "SymmetricMode": False},
        )
    except RuntimeError as exc:
        row, kind = _locate_singular_row(A)
        where = f" at row {row}" if row is not None else ""
        raise SingularMatrixError(f"zero pivot: matrix is {kind}{where}", row=row) from exc

    lower = as_csr(lu.L)
    upper = as_csr(lu.U)
    diag_u = upper.diagonal()
    if np.any(diag_u == 0.0):
        k = int(np.flatnonzero(diag_u == 0.0)[0])
        row = int(np.flatnonzero(lu.perm_r == k)[0])
        raise SingularMatrixError(f"zero pivot: matrix is numerically singular at row {row}", row=row)
    # SuperLU stores P_r A P_c = L U with P_r[perm_r[i], i] = 1 and P_c[i, perm_c[i]] = 1
    row_permutation = np.empty(n, dtype=np.int64)
    row_permutation[lu.perm_r] = np.arange(n)
    # unit diagonal of L is implied, not counted
    nnz_factors = int(lower.nnz - n + upper.nnz)
    stats = FillStats(n_rows=n, nnz_matrix=int(A.nnz), nnz_factors=nnz_factors)
    column_permutation = np.empty(n, dtype=np.int64)
    column_permutation[lu.perm_c] = np.arange(n)
    return LUFactorization(lower, upper, row_permutation, column_permutation, stats, lu)


def lu_solve(F: LUFactorization, b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != F.shape[0]:
        raise ValueError(f"dimension mismatch: factorization has {F.shape[0]} rows, rhs has {b.shape[0]}")
    return F._superlu.solve(b)


def fill_in_report(A, pivot_threshold=0.1, ordering="colamd") -> FillStats:
    """Factor ``A`` and report stored entries per row for matrix and factors."""
    return lu_factor(A, pivot_threshold=pivot_threshold, ordering=ordering).fill_stats


def write_matrix_market(path, A, comment=""):
    scipy.io.mmwrite(str(path), sp.coo_matrix(A), comment=comment, field="real")


def read_matrix_market(path) -> SparseMatrix:
    return as_csr(scipy.io.mmread(str(path)))
