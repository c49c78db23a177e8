"""Iterative solvers: PD-GMRES, Bi-CGSTAB, Richardson and power iteration.

All solvers take the operator as a sparse matrix, a ``LinearOperator`` or a
plain callable, and a preconditioner as anything with an ``apply`` method, a
callable, or ``None`` for the identity.  Preconditioning is applied from the
right, so the monitored residual is always the true ``b - A x``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import aslinearoperator

from .sparse import lu_factor, lu_solve

logger = logging.getLogger(__name__)

_TINY = np.finfo(np.float64).tiny


class KrylovBreakdown(RuntimeError):
    pass


def as_matvec(op):
    if callable(op) and not hasattr(op, "shape"):
        return op
    lin = aslinearoperator(op)
    return lin.matvec


def as_apply(P):
    if P is None:
        return lambda r: np.array(r, dtype=np.float64, copy=True)
    if hasattr(P, "apply"):
        return P.apply
    if callable(P) and not hasattr(P, "shape"):
        return P
    return as_matvec(P)


@dataclass
class SolveReport:
    iterations: int
    residual_history: list
    converged: bool
    wall_time: float = 0.0
    restart_lengths: list = field(default_factory=list)
    message: str = ""

    def __post_init__(self):
        if not self.residual_history:
            raise ValueError("residual_history must not be empty")

    @property
    def final_residual(self):
        return self.residual_history[-1]


@dataclass
class RestartController:
    """Proportional-derivative control of the GMRES restart length.

    With ``r_j = log10(|res_j| / |res_{j-1}|)`` for the last cycle, the next
    length is ``m + floor(alpha_p * r_j + alpha_d * (r_j - r_{j-1}))``.  A cycle
    that keeps more than ``stagnation_ratio`` of its residual and would not
    lengthen the next one lengthens it by ``m_step`` instead.  The result is
    clamped to ``[m_min, m_max]``.
    """

    m_init: int = 3
    m_min: int = 3
    m_step: int = 5
    m_max: int | None = None
    alpha_p: float = -3.0
    alpha_d: float = 5.0
    stagnation_ratio: float = 0.9
    current_m: int = field(init=False)
    previous_rate: float | None = field(init=False, default=None)

    def __post_init__(self):
        if self.m_max is None:
            self.m_max = self.m_init + 10 * self.m_step
        if not 1 <= self.m_min <= self.m_init <= self.m_max:
            raise ValueError("need 1 <= m_min <= m_init <= m_max")
        self.reset()

    def reset(self):
        self.current_m = self.m_init
        self.previous_rate = None

    def update(self, ratio):
        """Feed the residual ratio of the finished cycle; returns the next ``m``."""
        rate = math.log10(ratio)
        previous = rate if self.previous_rate is None else self.previous_rate
        delta = math.floor(self.alpha_p * rate + self.alpha_d * (rate - previous))
        if delta <= 0 and ratio > self.stagnation_ratio:
            delta = self.m_step
        self.current_m = int(min(max(self.current_m + delta, self.m_min), self.m_max))
        self.previous_rate = rate
        return self.current_m


def _mgs_reorth(V, w, j):
    """Orthogonalize ``w`` against ``V[:, :j+1]``: modified Gram-Schmidt plus one
    reorthogonalization pass.  Returns the coefficients."""
    h = np.zeros(j + 1)
    for _ in range(2):
        for i in range(j + 1):
            c = V[:, i] @ w
            w -= c * V[:, i]
            h[i] += c
    return h


def pd_gmres(op, P, b, tol_abs, max_restarts=200, ctrl=None, x0=None):
    """Right-preconditioned restarted GMRES with adaptive restart length.

    Stops as soon as ``|b - A x|_2 <= tol_abs``.  Returns ``(x, SolveReport)``.
    """
    start = time.perf_counter()
    matvec = as_matvec(op)
    precond = as_apply(P)
    ctrl = RestartController() if ctrl is None else ctrl
    ctrl.reset()
    b = np.asarray(b, dtype=np.float64)
    n = b.shape[0]
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - matvec(x) if x0 is not None else b.copy()
    beta = np.linalg.norm(r)
    history = [beta]
    lengths = []
    iterations = 0
    if beta <= tol_abs:
        return x, SolveReport(0, history, True, time.perf_counter() - start, lengths)

    for _cycle in range(max_restarts):
        m = min(ctrl.current_m, n)
        lengths.append(m)
        V = np.zeros((n, m + 1))
        Z = np.zeros((n, m))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[:, 0] = r / beta
        k = 0
        for j in range(m):
            Z[:, j] = precond(V[:, j])
            w = matvec(Z[:, j])
            H[: j + 1, j] = _mgs_reorth(V, w, j)
            H[j + 1, j] = np.linalg.norm(w)
            iterations += 1
            for i in range(j):
                hi, hi1 = H[i, j], H[i + 1, j]
                H[i, j] = cs[i] * hi + sn[i] * hi1
                H[i + 1, j] = -sn[i] * hi + cs[i] * hi1
            happy = H[j + 1, j] <= 1e-14 * max(np.abs(H[: j + 1, j]).max(), _TINY)
            if not happy:
                V[:, j + 1] = w / H[j + 1, j]
            denom = math.hypot(H[j, j], H[j + 1, j])
            if denom == 0.0:
                raise KrylovBreakdown("Arnoldi Hessenberg matrix is singular")
            cs[j], sn[j] = H[j, j] / denom, H[j + 1, j] / denom
            H[j, j] = denom
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            k = j + 1
            estimate = abs(g[j + 1])
            if happy or estimate <= tol_abs:
                break
            history.append(estimate)
        R = H[:k, :k]
        if np.any(np.abs(np.diag(R)) <= _TINY):
            raise KrylovBreakdown("Arnoldi Hessenberg matrix is singular")
        y = _back_substitute(R, g[:k])
        x = x + Z[:, :k] @ y
        r = b - matvec(x)
        new_beta = np.linalg.norm(r)
        history.append(new_beta)
        if new_beta <= tol_abs:
            return x, SolveReport(iterations, history, True, time.perf_counter() - start, lengths)
        if new_beta == 0.0 or beta == 0.0:
            break
        ctrl.update(new_beta / beta)
        beta = new_beta
    report = SolveReport(iterations, history, False, time.perf_counter() - start, lengths,
                         message=f"no convergence within {max_restarts} restarts")
    logger.warning("pd_gmres: %s (residual %.3e, target %.3e)", report.message, history[-1], tol_abs)
    return x, report


def _back_substitute(R, g):
    k = R.shape[0]
    y = np.zeros(k)
    for i in range(k - 1, -1, -1):
        y[i] = (g[i] - R[i, i + 1:] @ y[i + 1:]) / R[i, i]
    return y


def bicgstab(op, P, b, tol_abs, max_iters=1000, x0=None):
    """Right-preconditioned Bi-CGSTAB stopping on ``|b - A x|_2 <= tol_abs``.

    On a rho or omega breakdown the shadow residual is reset to the current
    residual once; a second breakdown raises :class:`KrylovBreakdown`.
    """
    start = time.perf_counter()
    matvec = as_matvec(op)
    precond = as_apply(P)
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - matvec(x)
    norm_r = np.linalg.norm(r)
    history = [norm_r]
    if norm_r <= tol_abs:
        return x, SolveReport(0, history, True, time.perf_counter() - start)

    restarted = False
    r_hat = r.copy()
    rho = alpha = omega = 1.0
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    it = 0
    while it < max_iters:
        rho_new = r_hat @ r
        if abs(rho_new) <= 1e-30 * (np.linalg.norm(r_hat) * norm_r + _TINY):
            if restarted:
                raise KrylovBreakdown("Bi-CGSTAB rho breakdown after restart")
            restarted = True
            r_hat, rho, alpha, omega = r.copy(), 1.0, 1.0, 1.0
            v[:] = 0.0
            p[:] = 0.0
            continue
        beta = (rho_new / rho) * (alpha / omega)
        p = r + beta * (p - omega * v)
        p_hat = precond(p)
        v = matvec(p_hat)
        denom = r_hat @ v
        if abs(denom) <= 1e-30 * (np.linalg.norm(r_hat) * np.linalg.norm(v) + _TINY):
            if restarted:
                raise KrylovBreakdown("Bi-CGSTAB breakdown: shadow residual orthogonal to A p")
            restarted = True
            r_hat, rho, alpha, omega = r.copy(), 1.0, 1.0, 1.0
            v[:] = 0.0
            p[:] = 0.0
            continue
        alpha = rho_new / denom
        s = r - alpha * v
        it += 1
        if np.linalg.norm(s) <= tol_abs:
            x = x + alpha * p_hat
            r = b - matvec(x)
            norm_r = np.linalg.norm(r)
            history.append(norm_r)
            if norm_r <= tol_abs:
                return x, SolveReport(it, history, True, time.perf_counter() - start)
            rho = rho_new
            continue
        s_hat = precond(s)
        t = matvec(s_hat)
        tt = t @ t
        omega = (t @ s) / tt if tt > 0 else 0.0
        x = x + alpha * p_hat + omega * s_hat
        r = s - omega * t
        rho = rho_new
        norm_r = np.linalg.norm(r)
        if norm_r <= tol_abs:
            r = b - matvec(x)
            norm_r = np.linalg.norm(r)
            if norm_r <= tol_abs:
                history.append(norm_r)
                return x, SolveReport(it, history, True, time.perf_counter() - start)
        history.append(norm_r)
        if abs(omega) <= 1e-30:
            if restarted:
                raise KrylovBreakdown("Bi-CGSTAB omega breakdown after restart")
            restarted = True
            r = b - matvec(x)
            r_hat, rho, alpha, omega = r.copy(), 1.0, 1.0, 1.0
            v[:] = 0.0
            p[:] = 0.0
    r = b - matvec(x)
    history.append(np.linalg.norm(r))
    report = SolveReport(it, history, history[-1] <= tol_abs, time.perf_counter() - start,
                         message=f"no convergence within {max_iters} iterations")
    if not report.converged:
        logger.warning("bicgstab: %s (residual %.3e, target %.3e)", report.message, history[-1], tol_abs)
    return x, report


def richardson(op, P, b, omega, n_steps, x0=None):
    """``n_steps`` of ``x <- x + omega * P (b - A x)``."""
    matvec = as_matvec(op)
    precond = as_apply(P)
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    for _ in range(n_steps):
        x = x + omega * precond(b - matvec(x))
    return x


@dataclass(frozen=True)
class EigenEstimate:
    value: float
    iterations: int
    converged: bool


def power_iteration(op, tol_rel=1e-6, max_iters=1000, seed=0, n=None) -> EigenEstimate:
    """Rayleigh-quotient estimate of the dominant eigenvalue.

    ``n`` is needed only when ``op`` is a bare callable.
    """
    matvec = as_matvec(op)
    if n is None:
        n = op.shape[0]
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    lam = None
    for it in range(1, max_iters + 1):
        y = matvec(x)
        new = float(x @ y)
        norm_y = np.linalg.norm(y)
        if norm_y == 0.0:
            return EigenEstimate(0.0, it, True)
        x = y / norm_y
        if lam is not None and abs(new - lam) <= tol_rel * abs(new):
            return EigenEstimate(new, it, True)
        lam = new
    return EigenEstimate(lam, max_iters, False)


def direct_residual(A, b):
    """Residual norm of the sparse direct solution of ``A x = b``."""
    x = lu_solve(lu_factor(A), b)
    return float(np.linalg.norm(b - A @ x)), x


def direct_tolerance(A, b, factor=10.0):
    """Absolute Krylov tolerance: ``factor`` times the direct solver's residual."""
    res, _ = direct_residual(A, b)
    return factor * res
