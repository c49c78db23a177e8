"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary section
at the end of the pytest output lists every criterion.
"""

import math

import numpy as np
import pytest
import scipy.sparse as sp

from stokesdarcy.bench import fill_in_rows, run_transient, verify, wiring
from stokesdarcy.coupling import CoupledProblem, CouplingConfig
from stokesdarcy.discretize import (
    SOLVER_CHOICES,
    ScenarioConfig,
    assemble_darcy,
    assemble_mac,
    build_grid,
)
from stokesdarcy.krylov import power_iteration
from stokesdarcy.precond import ILU0, BlockPreconditioner, DirectSolve, amg_setup
from stokesdarcy.sparse import lu_factor, lu_solve

EQUIVALENCE_CONFIGS = ("umfpack", "pv_bj_amg_amg", "pv_bgs_amg_amg", "td_bj_uzawa_amg",
                       "td_bgs_uzawa_amg", "precice_umfpack")
BLOCK_CONFIGS = tuple(c for c in SOLVER_CHOICES if wiring(c).monolithic and wiring(c).iterative)


@pytest.fixture(scope="module")
def equivalence_runs():
    return {n: verify(n, EQUIVALENCE_CONFIGS) for n in (2, 6, 16)}


def test_criterion_1_cross_method_equivalence(equivalence_runs, acceptance_report):
    worst = {n: r.max_pairwise for n, r in equivalence_runs.items()}
    converged = all(not r.convergence_failures for r in equivalence_runs.values())
    ok = max(worst.values()) <= 1e-6 and converged
    detail = ", ".join(f"n={n}: {w:.1e}" for n, w in worst.items())
    acceptance_report(1, ok, f"max pairwise relative difference {detail} (limit 1e-6)")
    assert converged
    assert max(worst.values()) <= 1e-6, worst


def test_criterion_2_fill_in_trend(acceptance_report):
    r16, r50 = fill_in_rows([16, 50])
    dens = abs(r50["entries_per_dof_matrix"] - r16["entries_per_dof_matrix"]) / r16["entries_per_dof_matrix"]
    growth = r50["entries_per_dof_factors"] / r16["entries_per_dof_factors"]
    ok = dens < 0.05 and growth >= 1.5
    acceptance_report(2, ok, f"matrix density change {dens:.1%} (<5%), factor density growth x{growth:.2f} (>=1.5)")
    assert dens < 0.05
    assert growth >= 1.5


def _coupling_iterations(cfg, acceleration):
    P = CoupledProblem(cfg, CouplingConfig(acceleration=acceleration, epsilon=1e-8))
    P.run()
    assert all(e.converged for e in P.log)
    return [e.iterations for e in P.log]


def test_criterion_3_iqn_ils(acceptance_report):
    small = _coupling_iterations(ScenarioConfig(cells_per_unit_square=2), "iqn_ils")
    per_grid = {}
    for n in (2, 6, 16):
        cfg = ScenarioConfig(cells_per_unit_square=n)
        iqn = _coupling_iterations(cfg, "iqn_ils")
        picard = _coupling_iterations(cfg, "picard")
        per_grid[n] = (max(iqn), max(picard), all(q <= p for q, p in zip(iqn, picard)))
    ok = max(small) <= 4 and all(v[2] for v in per_grid.values())
    detail = f"2x2 max iterations {max(small)} (<=4); " + ", ".join(
        f"n={n}: IQN {a} vs Picard {b}" for n, (a, b, _) in per_grid.items())
    acceptance_report(3, ok, detail)
    assert max(small) <= 4
    assert all(v[2] for v in per_grid.values())


def _poiseuille_error(n, mu=1e-3, dp=1e-3):
    s = assemble_mac(nx=n, ny=n, h=1 / n, mu=mu, rho=1e3, inv_dt=0.0,
                     left=("pressure", dp), right=("pressure", 0.0),
                     top=("velocity", 0.0, 0.0), bottom=("velocity", 0.0, 0.0))
    x = s.expand(lu_solve(lu_factor(s.matrix), s.rhs))
    b = s.extra["box"]
    u = np.array([x[b.u(i, j)] for j in range(n) for i in range(n + 1)])
    y = np.array([(j + 0.5) / n for j in range(n) for _ in range(n + 1)])
    exact = dp / (2 * mu) * y * (1 - y)
    return np.linalg.norm(u - exact) / np.linalg.norm(exact)


def test_criterion_4_subdomain_oracles(acceptance_report):
    tpfa = 0.0
    for n in (4, 10, 25):
        cfg = ScenarioConfig(cells_per_unit_square=n, permeability=3e-7)
        g = build_grid(cfg)
        A, b = assemble_darcy(g, cfg, bottom=2.0, top=-1.0)
        p = lu_solve(lu_factor(A), b)
        exact = 2.0 - 3.0 * g.cell_centres_pm()[:, 1]
        tpfa = max(tpfa, np.linalg.norm(p - exact) / np.linalg.norm(exact))
    errs = [_poiseuille_error(n) for n in (8, 16, 32)]
    order = min(math.log2(a / b) for a, b in zip(errs, errs[1:]))
    ok = tpfa <= 1e-12 and order >= 1.8
    acceptance_report(4, ok, f"TPFA linear field error {tpfa:.1e} (<=1e-12), Poiseuille order {order:.2f} (>=1.8)")
    assert tpfa <= 1e-12
    assert order >= 1.8


def test_criterion_5_preconditioner_units(acceptance_report):
    n = 40
    T = sp.diags([-1.0, 2.2, -1.0], [-1, 0, 1], shape=(n, n), format="csr")
    r = np.cos(np.arange(n))
    ilu = np.linalg.norm(ILU0(T).apply(r) - np.linalg.solve(T.toarray(), r)) / np.linalg.norm(r)

    L = sp.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(500, 500), format="csr")
    H = amg_setup(L)
    galerkin = max(abs(f.P.T @ f.A @ f.P - c.A).max() for f, c in zip(H.levels, H.levels[1:]))

    rng = np.random.default_rng(7)
    A = (sp.random(30, 30, density=0.25, random_state=rng) + 5 * sp.eye(30)).tocsr()
    part = (slice(0, 18), slice(18, 30))
    P = BlockPreconditioner("td_bgs", A, part, (DirectSolve(A[:18, :18]), DirectSolve(A[18:, 18:])))
    lower = A.toarray()
    lower[:18, 18:] = 0.0
    rhs = rng.standard_normal(30)
    bgs = np.abs(P.apply(rhs) - np.linalg.solve(lower, rhs)).max()

    M = rng.standard_normal((20, 20))
    S = M @ M.T + np.eye(20)
    lam = np.linalg.eigvalsh(S)[-1]
    power = abs(power_iteration(S, tol_rel=1e-8, max_iters=20000).value - lam) / lam

    ok = ilu <= 1e-14 and galerkin == 0.0 and len(H.levels) > 1 and bgs <= 1e-12 and power <= 0.01
    acceptance_report(5, ok, f"ILU0 {ilu:.1e}, Galerkin {galerkin:.1e} over {len(H.levels)} levels, "
                             f"td_bgs {bgs:.1e}, power iteration {power:.1e}")
    assert ilu <= 1e-14
    assert galerkin == 0.0 and len(H.levels) > 1
    assert bgs <= 1e-12
    assert power <= 0.01


def test_criterion_6_stopping_rule(equivalence_runs, acceptance_report):
    runs = list(equivalence_runs.values())
    runs.append(verify(6, ("umfpack",) + BLOCK_CONFIGS))
    violations = [v for r in runs for v in r.stopping_failures]
    unconverged = [v for r in runs for v in r.convergence_failures]
    ratios = [rec.final_residual / rec.tolerance for r in runs for recs in r.records.values() for rec in recs
              if wiring(rec.config).monolithic and wiring(rec.config).iterative]
    ok = not violations and not unconverged and max(ratios) <= 1.0
    acceptance_report(6, ok, f"{len(ratios)} iterative solves, worst residual/(10 x direct) = {max(ratios):.2f}")
    assert not violations and not unconverged


SCALING_SIZES = (6, 16, 50)
SCALING_STEPS = 4
SCALING_REPS = 3


def _per_step_time(name, n):
    cfg = ScenarioConfig(cells_per_unit_square=n, solver=name)
    recs = run_transient(cfg, name, repetitions=SCALING_REPS, n_steps=SCALING_STEPS)
    assert all(r.converged for r in recs)
    return float(np.mean([r.wall_time for r in recs]))


def test_criterion_7_scaling_trend(acceptance_report):
    times = {name: [_per_step_time(name, n) for n in SCALING_SIZES]
             for name in ("umfpack",) + BLOCK_CONFIGS}
    slope = {k: np.polyfit(np.log(SCALING_SIZES), np.log(v), 1)[0] for k, v in times.items()}
    best = min(BLOCK_CONFIGS, key=lambda k: times[k][-1])
    diff = slope["umfpack"] - slope[best]
    ok = diff > 0.2
    acceptance_report(7, ok, f"slope direct {slope['umfpack']:.2f}, best block ({best}) {slope[best]:.2f}, "
                             f"difference {diff:.2f} (>0.2)")
    assert diff > 0.2, (slope, times)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
