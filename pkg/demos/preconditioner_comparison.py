"""PD-GMRES on one monolithic system with each block preconditioner.

Assembles the coupled system at the final time, computes the direct residual,
and solves to ten times that residual with every block preconditioner.  The
table shows outer iterations, restart lengths chosen by the controller and
the wall time including preconditioner setup.

    python demos/preconditioner_comparison.py [cells_per_unit_square]
"""

import sys
import time

import numpy as np

from stokesdarcy import MonolithicStepper, ScenarioConfig, build_block_preconditioner, build_grid, pd_gmres
from stokesdarcy.krylov import direct_residual

CASES = [
    ("td_bj", "uzawa", "amg"),
    ("td_bgs", "uzawa", "amg"),
    ("td_bgs", "uzawa", "ilu0"),
    ("pv_bj", "amg", "amg"),
    ("pv_bgs", "amg", "amg"),
]


def main(n=16):
    cfg = ScenarioConfig(cells_per_unit_square=n)
    system = MonolithicStepper(build_grid(cfg), cfg).system(None, cfg.t_end)
    res, _ = direct_residual(system.matrix, system.rhs)
    tol = 10 * res
    print(f"n={n}, {system.matrix.shape[0]} unknowns, direct residual {res:.2e}")
    for kind, first, last in CASES:
        start = time.perf_counter()
        P = build_block_preconditioner(system, kind, first, last)
        x, rep = pd_gmres(system.matrix, P, system.rhs, tol, max_restarts=5000)
        wall = time.perf_counter() - start
        final = np.linalg.norm(system.rhs - system.matrix @ x)
        print(f"{kind:6s} ({first}, {last}): {rep.iterations:4d} iterations, "
              f"restarts {rep.restart_lengths[:6]}..., residual {final:.2e}, {wall:.2f}s")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 16)
