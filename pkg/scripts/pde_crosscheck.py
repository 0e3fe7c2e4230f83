"""Compare the regression decoupling field with a finite-difference solve, knot by knot."""
import argparse
import math

from mbsde.config import parse_config
from mbsde.markovian import PdeGrid, pde_crosscheck
from mbsde.pipeline import execute


def cli():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--scenario", default="damped-heat")
    p.add_argument("--paths", type=int, default=100_000)
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--dx", type=float, default=0.01)
    args = p.parse_args()
    cfg = parse_config({"problem": {"scenario": args.scenario}, "grid": {"N": args.steps},
                        "ensemble": {"M": args.paths}})
    out = execute(cfg)
    if out.route != "markovian" or out.status != "converged":
        raise SystemExit(f"{args.scenario}: route {out.route}, status {out.status}")
    pde = PdeGrid(L=max(5.0, 8.0 * math.sqrt(out.problem.T)), dx=args.dx, n=out.problem.n)
    _, rep = pde_crosscheck(out.problem, out.extras["fbsde"].field, out.ensemble, pde)
    print(f"{'knot':>5} {'gap':>10} {'allowed':>10}")
    for r in rep["knots"]:
        print(f"{r['knot']:>5} {r['gap']:>10.2e} {r['allowed']:>10.2e}")
    print("PASS" if rep["passes"] else "FAIL")


if __name__ == "__main__":
    cli()
