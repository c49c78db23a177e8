"""Preconditioners: ILU(0), Gauss-Seidel, aggregation AMG, Uzawa and the four
block preconditioners for the two-domain (td) and pressure-velocity (pv)
partitionings of the coupled matrix.

Every preconditioner is a fixed linear map applied through ``apply(r)``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .krylov import power_iteration
from .sparse import LUFactorization, SingularMatrixError, as_csr, lu_factor, lu_solve


def triangular_solver(T):
    """Reusable solver for a sparse triangular matrix with nonzero diagonal.

    SuperLU in natural order without pivoting reproduces the triangle itself,
    so there is no fill; the solves then run in compiled code.
    """
    lu = splu(sp.csc_matrix(T), permc_spec="NATURAL", diag_pivot_thresh=0.0,
              options={"SymmetricMode": True})
    return lu.solve


class Preconditioner:
    """Base class: counts applications and keeps setup time."""

    shape: tuple
    setup_time: float = 0.0

    def __init__(self):
        self.n_applications = 0

    def apply(self, r):
        self.n_applications += 1
        return self._apply(np.asarray(r, dtype=np.float64))

    __call__ = apply

    def _apply(self, r):
        raise NotImplementedError

    def to_dense(self):
        """Explicit matrix of the (linear) map, column by column."""
        n = self.shape[1]
        eye = np.eye(n)
        return np.column_stack([self._apply(eye[:, k]) for k in range(n)])

    @property
    def storage(self):
        """Stored floating point values (factors, hierarchies)."""
        return 0


class IdentityPreconditioner(Preconditioner):
    def __init__(self, n):
        super().__init__()
        self.shape = (n, n)

    def _apply(self, r):
        return r.copy()


class MatrixPreconditioner(Preconditioner):
    """Applies an explicitly given matrix."""

    def __init__(self, M):
        super().__init__()
        self.M = M
        self.shape = M.shape

    def _apply(self, r):
        return self.M @ r


class DirectSolve(Preconditioner):
    """Exact inverse through the sparse LU factorization."""

    def __init__(self, A, factorization: LUFactorization | None = None):
        super().__init__()
        start = time.perf_counter()
        self.shape = A.shape
        self.lu = lu_factor(A) if factorization is None else factorization
        self.setup_time = time.perf_counter() - start

    def _apply(self, r):
        return lu_solve(self.lu, r)

    @property
    def storage(self):
        return self.lu.fill_stats.nnz_factors


# ---------------------------------------------------------------------------
# ILU(0)


class ILU0(Preconditioner):
    """Incomplete LU restricted to the sparsity pattern of ``A`` (no pivoting)."""

    def __init__(self, A):
        super().__init__()
        start = time.perf_counter()
        A = as_csr(A)
        n = A.shape[0]
        if A.shape[1] != n:
            raise ValueError("ILU(0) needs a square matrix")
        self.shape = A.shape
        indptr, indices = A.indptr, A.indices
        vals = A.data.copy()
        diag_pos = np.full(n, -1, dtype=np.int64)
        for i in range(n):
            row = indices[indptr[i]:indptr[i + 1]]
            hit = np.flatnonzero(row == i)
            if hit.size == 0:
                raise SingularMatrixError(f"ILU(0): zero pivot at row {i}", row=i)
            diag_pos[i] = indptr[i] + hit[0]
        for i in range(n):
            lo, hi = indptr[i], indptr[i + 1]
            pos = {indices[q]: q for q in range(lo, hi)}
            for q in range(lo, diag_pos[i]):
                k = indices[q]
                vals[q] /= vals[diag_pos[k]]
                lik = vals[q]
                for qq in range(diag_pos[k] + 1, indptr[k + 1]):
                    target = pos.get(indices[qq])
                    if target is not None:
                        vals[target] -= lik * vals[qq]
            if vals[diag_pos[i]] == 0.0:
                raise SingularMatrixError(f"ILU(0): zero pivot at row {i}", row=i)
        LU = sp.csr_matrix((vals, indices.copy(), indptr.copy()), shape=A.shape)
        self.lower = sp.tril(LU, k=-1, format="csr") + sp.eye(n, format="csr")
        self.upper = sp.triu(LU, format="csr")
        self._lower_solve = triangular_solver(self.lower)
        self._upper_solve = triangular_solver(self.upper)
        self.setup_time = time.perf_counter() - start

    def _apply(self, r):
        return self._upper_solve(self._lower_solve(r))

    @property
    def storage(self):
        return self.lower.nnz + self.upper.nnz - self.shape[0]


def ilu0_setup(A) -> ILU0:
    return ILU0(A)


def ilu0_apply(P: ILU0, r):
    return P.apply(r)


# ---------------------------------------------------------------------------
# Gauss-Seidel / SOR


class GaussSeidel(Preconditioner):
    """``sweeps`` forward SOR sweeps on ``A z = r`` starting from zero."""

    def __init__(self, A, omega=1.0, sweeps=1):
        super().__init__()
        A = as_csr(A)
        self.A = A
        self.shape = A.shape
        self.omega = omega
        self.sweeps = sweeps
        d = A.diagonal()
        if np.any(d == 0.0):
            row = int(np.flatnonzero(d == 0.0)[0])
            raise SingularMatrixError(f"Gauss-Seidel: zero diagonal at row {row}", row=row)
        strict_lower = sp.tril(A, k=-1, format="csr")
        self._solve = triangular_solver(sp.diags(d / omega) + strict_lower)

    def sweep(self, r, z):
        """One forward sweep ``z <- z + (D/omega + L)^{-1} (r - A z)``."""
        return z + self._solve(r - self.A @ z)

    def _apply(self, r):
        z = np.zeros_like(r)
        for s in range(self.sweeps):
            z = self._solve(r) if s == 0 else self.sweep(r, z)
        return z


def gauss_seidel_apply(A, r, omega=1.0, sweeps=1):
    return GaussSeidel(A, omega, sweeps)._apply(np.asarray(r, dtype=np.float64))


# ---------------------------------------------------------------------------
# aggregation AMG


def strength_graph(A, theta):
    """Off-diagonal entries with ``|a_ij| >= theta * sqrt(|a_ii a_jj|)``."""
    A = as_csr(A)
    C = A.tocoo()
    d = np.abs(A.diagonal())
    off = C.row != C.col
    strong = off & (np.abs(C.data) >= theta * np.sqrt(d[C.row] * d[C.col]))
    S = sp.csr_matrix((np.abs(C.data[strong]), (C.row[strong], C.col[strong])), shape=A.shape)
    # connections are used symmetrically
    S = S.maximum(S.T).tocsr()
    S.sort_indices()
    return S


def aggregate(A, theta):
    """Greedy aggregation: seed each aggregate with the lowest unaggregated index
    whose strong neighbours are all free, grow it by one ring, then attach the
    leftovers to their strongest aggregated neighbour."""
    S = strength_graph(A, theta)
    n = S.shape[0]
    agg = np.full(n, -1, dtype=np.int64)
    indptr, indices, data = S.indptr, S.indices, S.data
    n_agg = 0
    for i in range(n):
        if agg[i] >= 0:
            continue
        nbrs = indices[indptr[i]:indptr[i + 1]]
        if nbrs.size == 0 or np.any(agg[nbrs] >= 0):
            continue
        agg[i] = n_agg
        agg[nbrs] = n_agg
        n_agg += 1
    for i in range(n):
        if agg[i] >= 0:
            continue
        lo, hi = indptr[i], indptr[i + 1]
        nbrs, weights = indices[lo:hi], data[lo:hi]
        taken = agg[nbrs] >= 0
        if np.any(taken):
            agg[i] = agg[nbrs[taken][np.argmax(weights[taken])]]
    for i in range(n):
        if agg[i] < 0:
            nbrs = indices[indptr[i]:indptr[i + 1]]
            agg[i] = n_agg
            free = nbrs[agg[nbrs] < 0]
            agg[free] = n_agg
            n_agg += 1
    return agg, n_agg


@dataclass
class AMGLevel:
    A: sp.csr_matrix
    aggregates: np.ndarray | None = None
    P: sp.csr_matrix | None = None
    smoother: GaussSeidel | None = None


@dataclass
class AMGHierarchy:
    levels: list
    coarse_lu: LUFactorization
    max_levels: int
    strength_theta: float
    coarse_size: int
    setup_time: float = 0.0

    @property
    def sizes(self):
        return [lvl.A.shape[0] for lvl in self.levels]

    @property
    def storage(self):
        return sum(lvl.A.nnz for lvl in self.levels) + self.coarse_lu.fill_stats.nnz_factors


def amg_setup(A, max_levels=3, strength_theta=0.25, coarse_size=100) -> AMGHierarchy:
    """Non-smoothed aggregation hierarchy with Galerkin coarse operators.

    Levels stop at ``max_levels``, at ``coarse_size`` rows, or when
    aggregation no longer reduces the size; the last level is factored.
    """
    start = time.perf_counter()
    A = as_csr(A)
    levels = [AMGLevel(A)]
    while len(levels) < max_levels and levels[-1].A.shape[0] > coarse_size:
        fine = levels[-1]
        agg, n_agg = aggregate(fine.A, strength_theta)
        if n_agg >= fine.A.shape[0]:
            break
        n = fine.A.shape[0]
        P = sp.csr_matrix((np.ones(n), (np.arange(n), agg)), shape=(n, n_agg))
        Ac = as_csr(P.T @ fine.A @ P)
        fine.aggregates, fine.P = agg, P
        fine.smoother = GaussSeidel(fine.A, omega=1.0, sweeps=1)
        levels.append(AMGLevel(Ac))
    coarse_lu = lu_factor(levels[-1].A)
    return AMGHierarchy(levels, coarse_lu, max_levels, strength_theta, coarse_size,
                        time.perf_counter() - start)


def amg_vcycle_apply(H: AMGHierarchy, r, level=0):
    """One V(1,1) cycle with forward Gauss-Seidel smoothing, from a zero guess."""
    r = np.asarray(r, dtype=np.float64)
    lvl = H.levels[level]
    if level == len(H.levels) - 1:
        return lu_solve(H.coarse_lu, r)
    sm = lvl.smoother
    z = sm._apply(r)
    rc = lvl.P.T @ (r - lvl.A @ z)
    z = z + lvl.P @ amg_vcycle_apply(H, rc, level + 1)
    return sm.sweep(r, z)


class AMG(Preconditioner):
    def __init__(self, A, max_levels=3, strength_theta=0.25, coarse_size=100):
        super().__init__()
        self.hierarchy = amg_setup(A, max_levels, strength_theta, coarse_size)
        self.shape = A.shape
        self.setup_time = self.hierarchy.setup_time

    def _apply(self, r):
        return amg_vcycle_apply(self.hierarchy, r)

    @property
    def storage(self):
        return self.hierarchy.storage


# ---------------------------------------------------------------------------
# Uzawa


@dataclass
class UzawaConfig:
    mode: str = "inexact"
    omega: float | None = None
    power_tol: float = 1e-4
    power_max_iters: int = 200
    seed: int = 0
    amg_options: dict = field(default_factory=dict)


class Uzawa(Preconditioner):
    """One Uzawa sweep for ``[[V, B], [C, 0]]``.

    ``z_v = V~^{-1} r_v`` (exact LU or one AMG V-cycle), then the pressure
    Richardson step ``z_p = omega (C z_v - r_p)`` with ``omega = 1 / lambda_max``
    of ``C V~^{-1} B``, estimated once by power iteration.
    """

    def __init__(self, V, B, C, cfg: UzawaConfig | None = None):
        super().__init__()
        start = time.perf_counter()
        cfg = UzawaConfig() if cfg is None else cfg
        self.cfg = cfg
        self.V, self.B, self.C = as_csr(V), as_csr(B), as_csr(C)
        self.n_v = self.V.shape[0]
        self.n_p = self.C.shape[0]
        self.shape = (self.n_v + self.n_p,) * 2
        if cfg.mode == "exact":
            self.inner = DirectSolve(self.V)
        elif cfg.mode == "inexact":
            self.inner = AMG(self.V, **cfg.amg_options)
        else:
            raise ValueError(f"unknown Uzawa mode {cfg.mode!r}")
        if cfg.omega is None:
            if self.B.nnz == 0 or self.C.nnz == 0:
                self.lambda_max = 1.0
            else:
                est = power_iteration(self.schur_apply, cfg.power_tol, cfg.power_max_iters, cfg.seed, n=self.n_p)
                self.lambda_max = est.value
            self.omega = 1.0 / self.lambda_max
        else:
            self.omega = cfg.omega
        if not self.omega > 0:
            raise ValueError(f"Uzawa relaxation must be positive, got {self.omega}")
        self.setup_time = time.perf_counter() - start

    def schur_apply(self, q):
        return self.C @ self.inner._apply(self.B @ q)

    def _apply(self, r):
        r_v, r_p = r[: self.n_v], r[self.n_v:]
        z_v = self.inner._apply(r_v)
        z_p = self.omega * (self.C @ z_v - r_p)
        return np.concatenate([z_v, z_p])

    @property
    def storage(self):
        return self.inner.storage


def uzawa_apply(V, B, C, cfg: UzawaConfig, r):
    z = Uzawa(V, B, C, cfg)._apply(np.asarray(r, dtype=np.float64))
    n_v = V.shape[0]
    return z[:n_v], z[n_v:]


# ---------------------------------------------------------------------------
# block preconditioners

BLOCK_KINDS = ("td_bj", "td_bgs", "pv_bj", "pv_bgs")


def _ranges(partition):
    return [(s.start, s.stop) for s in partition]


class BlockPreconditioner(Preconditioner):
    """Block-Jacobi / block-Gauss-Seidel preconditioners.

    ``td_*`` use the 2x2 partition ``(free flow, porous medium)`` with
    sub-preconditioners ``(P_A', P_D')``; ``pv_*`` use the 3x3 partition
    ``(velocity, free-flow pressure, porous pressure)`` with ``(P_V, P_D')``
    and the identity on the free-flow pressure block.
    """

    def __init__(self, kind, matrix, partition, subs):
        super().__init__()
        if kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block preconditioner {kind!r}")
        expected = 2 if kind.startswith("td") else 3
        if len(partition) != expected:
            raise ValueError(f"{kind} needs a {expected}-block partition")
        ranges = _ranges(partition)
        if ranges[0][0] != 0 or ranges[-1][1] != matrix.shape[0] or any(
                a[1] != b[0] for a, b in zip(ranges, ranges[1:])):
            raise ValueError("partition must cover all rows contiguously")
        if len(subs) != 2:
            raise ValueError("expected two sub-preconditioners")
        first, last = partition[0], partition[-1]
        for sub, blk in zip(subs, (first, last)):
            size = blk.stop - blk.start
            if tuple(sub.shape) != (size, size):
                raise ValueError(f"sub-preconditioner of shape {sub.shape} does not match block size {size}")
        self.kind = kind
        self.shape = matrix.shape
        self.partition = partition
        self.P_first, self.P_last = subs
        A = as_csr(matrix)
        if kind == "td_bgs":
            self.C_td = A[last, first].tocsr()
        elif kind == "pv_bgs":
            self.C_pv = A[partition[1], first].tocsr()
            self.C1 = A[last, first].tocsr()
        self.setup_time = sum(getattr(s, "setup_time", 0.0) for s in subs)

    def _apply(self, r):
        z = np.empty_like(r)
        first, last = self.partition[0], self.partition[-1]
        z[first] = self.P_first.apply(r[first])
        if self.kind == "td_bj":
            z[last] = self.P_last.apply(r[last])
        elif self.kind == "td_bgs":
            z[last] = self.P_last.apply(r[last] - self.C_td @ z[first])
        elif self.kind == "pv_bj":
            mid = self.partition[1]
            z[mid] = r[mid]
            z[last] = self.P_last.apply(r[last])
        else:
            mid = self.partition[1]
            z[mid] = r[mid] - self.C_pv @ z[first]
            z[last] = self.P_last.apply(r[last] - self.C1 @ z[first])
        return z

    @property
    def storage(self):
        return self.P_first.storage + self.P_last.storage


def block_precond_apply(kind, subs, system, r):
    partition = system.td_partition if kind.startswith("td") else system.pv_partition
    return BlockPreconditioner(kind, system.matrix, partition, subs).apply(r)


def darcy_preconditioning_block(system):
    """Porous block used to build ``P_D'``.

    With no-flow outer boundaries ``D'`` is singular (constants), so the
    interface cells get the half-cell transmissibility ``2 K / mu``.  This is
    the interface part of the Schur complement ``D' - C' A'^{-1} B'`` and
    equals the porous operator with Dirichlet interface pressure.
    """
    g, cfg = system.grid, system.cfg
    D = system.block(system.td_partition[1], system.td_partition[1])
    extra = np.zeros(g.n_p_pm)
    extra[g.interface_cells] = 2.0 * cfg.permeability / cfg.viscosity
    return as_csr(D + sp.diags(extra))


def make_sub_preconditioner(name, A, **options):
    """Factory for the block-level preconditioners named in the solver table."""
    name = name.lower()
    if name == "amg":
        return AMG(A, **options)
    if name == "ilu0":
        return ILU0(A)
    if name in ("lu", "umfpack", "direct"):
        return DirectSolve(A)
    if name == "gs":
        return GaussSeidel(A, **options)
    if name == "identity":
        return IdentityPreconditioner(A.shape[0])
    raise ValueError(f"unknown sub-preconditioner {name!r}")


def make_uzawa(system_matrix, n_velocity, mode="inexact", **options):
    """Uzawa preconditioner for a saddle-point matrix whose first ``n_velocity``
    unknowns are velocities."""
    A = as_csr(system_matrix)
    v, p = slice(0, n_velocity), slice(n_velocity, A.shape[0])
    return Uzawa(A[v, v], A[v, p], A[p, v], UzawaConfig(mode=mode, **options))


def build_block_preconditioner(system, kind, first="amg", last="amg", uzawa_mode="inexact", amg_options=None):
    """Assemble one of the four block preconditioners for a :class:`CoupledSystem`.

    ``first`` names ``P_A'`` for td kinds (``"uzawa"``, ``"uzawa_e"`` or a
    generic name) or ``P_V`` for pv kinds; ``last`` names ``P_D'``.
    """
    amg_options = {} if amg_options is None else amg_options
    g = system.grid
    Dp = darcy_preconditioning_block(system)
    opts = amg_options if last == "amg" else {}
    P_last = make_sub_preconditioner(last, Dp, **opts)
    if kind.startswith("td"):
        ff = system.td_partition[0]
        A_ff = system.block(ff, ff)
        if first in ("uzawa", "uzawa_e"):
            mode = "exact" if first == "uzawa_e" else uzawa_mode
            P_first = make_uzawa(A_ff, g.n_velocity, mode=mode, amg_options=amg_options)
        else:
            P_first = make_sub_preconditioner(first, A_ff)
        partition = system.td_partition
    else:
        vel = system.pv_partition[0]
        opts = amg_options if first == "amg" else {}
        P_first = make_sub_preconditioner(first, system.block(vel, vel), **opts)
        partition = system.pv_partition
    return BlockPreconditioner(kind, system.matrix, partition, (P_first, P_last))


def is_finite_positive(x):
    return math.isfinite(x) and x > 0
