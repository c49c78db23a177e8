"""Matrix versus LU factor density under grid refinement.

The coupled matrix keeps a nearly constant number of entries per unknown,
while the sparse LU factors densify as the grid is refined.  The natural
ordering column shows what happens without a fill-reducing permutation; it
is skipped above n = 16 because the factors become too large to be practical.

    python demos/fill_in_growth.py
"""

from stokesdarcy import MonolithicStepper, ScenarioConfig, build_grid
from stokesdarcy.sparse import fill_in_report


def main(sizes=(6, 16, 50)):
    print(f"{'n':>4} {'DoF':>7} {'matrix':>8} {'colamd':>8} {'natural':>8}")
    for n in sizes:
        cfg = ScenarioConfig(cells_per_unit_square=n)
        A = MonolithicStepper(build_grid(cfg), cfg).matrix
        colamd = fill_in_report(A)
        natural = f"{fill_in_report(A, ordering='natural').entries_per_dof_factors:8.2f}" if n <= 16 else f"{'-':>8}"
        print(f"{n:4d} {A.shape[0]:7d} {colamd.entries_per_dof_matrix:8.2f} "
              f"{colamd.entries_per_dof_factors:8.2f} {natural}")


if __name__ == "__main__":
    main()
