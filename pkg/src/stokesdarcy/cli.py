"""Command line entry point: ``run``, ``fill-in`` and ``verify``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .bench import FILL_FIELDS, fill_in_rows, load_plan, run_plan, verify, write_csv
from .discretize import SOLVER_CHOICES, ScenarioConfig, load_scenario


def _sizes(text):
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not sizes or min(sizes) < 2:
        raise argparse.ArgumentTypeError("sizes must be integers >= 2")
    return sizes


def build_parser():
    p = argparse.ArgumentParser(prog="stokesdarcy", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a benchmark plan")
    run.add_argument("--config", required=True, help="scenario file (key = value)")
    run.add_argument("--plan", required=True, help="plan file (key = value)")
    run.add_argument("--out", required=True, help="output directory for the CSV reports")
    run.add_argument("--parallel", action="store_true", help="run plan cells in worker threads")

    fill = sub.add_parser("fill-in", help="matrix and LU factor density per grid size")
    fill.add_argument("--sizes", type=_sizes, default=[6, 16, 50])
    fill.add_argument("--config", help="scenario file; defaults to the built-in scenario")
    fill.add_argument("--out", required=True, help="CSV file to write")

    ver = sub.add_parser("verify", help="cross-method equivalence check; nonzero exit on failure")
    ver.add_argument("--size", type=int, default=6)
    ver.add_argument("--config", help="scenario file; defaults to the built-in scenario")
    ver.add_argument("--steps", type=int, help="number of time steps (default: all)")
    ver.add_argument("--configs", default="all", help="comma-separated configuration names or 'all'")
    ver.add_argument("--tolerance", type=float, default=1e-6)
    ver.add_argument("--coupling-log", help="append per-step coupling traces to this CSV")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = load_scenario(args.config) if getattr(args, "config", None) else ScenarioConfig()

    if args.command == "run":
        plan = load_plan(args.plan)
        if args.parallel:
            plan = replace(plan, parallel=True)
        paths = run_plan(plan, cfg, args.out)
        for kind, path in paths.items():
            print(f"{kind}: {path}")
        return 0

    if args.command == "fill-in":
        rows = fill_in_rows(args.sizes, cfg)
        write_csv(args.out, FILL_FIELDS, rows)
        for r in rows:
            print(f"n={r['grid_size']:4d} dof={r['dof']:7d} matrix={r['entries_per_dof_matrix']:.2f} "
                  f"factors={r['entries_per_dof_factors']:.2f}")
        return 0

    configs = SOLVER_CHOICES if args.configs == "all" else tuple(
        c.strip() for c in args.configs.split(",") if c.strip())
    result = verify(args.size, configs, args.steps, args.tolerance, cfg, args.coupling_log)
    for name, recs in result.records.items():
        last = recs[-1]
        print(f"{name:22s} converged={all(r.converged for r in recs)!s:5s} "
              f"final residual={last.final_residual:.3e}")
    print(f"max pairwise relative difference: {result.max_pairwise:.3e} (limit {result.tolerance:g})")
    for name, step, res, tol in result.stopping_failures:
        print(f"stopping rule violated: {name} step {step}: {res:.3e} > {tol:.3e}")
    for name, step in result.convergence_failures:
        print(f"not converged: {name} step {step}")
    print("PASS" if result.passed else "FAIL")
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
