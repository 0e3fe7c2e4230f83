"""Command line: ``mbsde {run,verify,sweep,oracle}``.

Exit codes: 0 success, 1 configuration error, 2 solver divergence,
3 bound or verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, parse_config
from .pipeline import (EXIT_BOUND, EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, execute, format_table,
                       nested_y0, verify_checks, write_checks, write_outputs)

log = logging.getLogger("mbsde")


def _config_from_args(args) -> RunConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    elif getattr(args, "scenario", None):
        cfg = parse_config({"problem": {"scenario": args.scenario}})
    else:
        raise ConfigError("pass --config PATH or --scenario NAME")
    changes = {}
    if args.seed is not None:
        changes["ensemble.seed"] = args.seed
    if args.paths is not None:
        changes["ensemble.M"] = args.paths
    if args.steps is not None:
        changes["grid.N"] = args.steps
    if args.route is not None:
        changes["route"] = args.route
    if args.out is not None:
        changes["output"] = args.out
    return cfg.replace(**changes) if changes else cfg


def _print_summary(out) -> None:
    y0, se = out.y0
    print(f"scenario {out.config.scenario.name}  route {out.route}  policy {out.policy}  "
          f"status {out.status}")
    if y0 is not None:
        for i, (m, s) in enumerate(zip(y0, se)):
            print(f"  Y0[{i}] = {m:.6f}  (SE {s:.2e})")
    orc = out.oracle()
    if orc is not None:
        print(f"  reference {orc['reference']['y0']}  gap {orc['gap']}  "
              f"threshold {orc['threshold']}  {'pass' if orc['passes'] else 'FAIL'}")
    if out.message:
        print(f"  {out.message}")


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    out = execute(cfg)
    if cfg.estimator.kind == "nested" and out.status == "converged":
        out.route_report = dict(out.route_report)
        out.route_report["nested"] = nested_y0(out, paths=cfg.tolerances.nested_paths)
    write_outputs(out, cfg.output)
    _print_summary(out)
    return out.exit_code


def cmd_verify(args) -> int:
    cfg = _config_from_args(args)
    out = execute(cfg)
    checks = verify_checks(out, nested=args.nested)
    write_outputs(out, cfg.output)
    write_checks(checks, Path(cfg.output) / "verify.csv")
    print(format_table(checks))
    if out.exit_code == EXIT_DIVERGED:
        print(out.message, file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK if all(c.passes for c in checks) else EXIT_BOUND


def _fit_slope(x, y) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    values = [int(v) for v in args.values.split(",")]
    key = "grid.N" if args.over == "N" else "ensemble.M"
    outdir = Path(cfg.output)
    outdir.mkdir(parents=True, exist_ok=True)
    rows, dts, errs, res = [], [], [], []
    worst = EXIT_OK
    # a deterministic Y0 isolates the discretisation error from Monte Carlo noise
    exact = cfg.scenario.exact_value(**cfg.params)
    for v in values:
        out = execute(cfg.replace(**{key: v}))
        worst = max(worst, out.exit_code)
        y0, se = out.y0
        if y0 is None:
            err = math.nan
        elif exact is not None:
            err = float(np.max(np.abs(np.asarray(y0) - exact)))
        else:
            orc = out.oracle()
            err = float(np.max(orc["gap"])) if orc else math.nan
        rmsq = out.diagnostics.residuals.total_mean_sq if out.diagnostics else math.nan
        dt = out.ensemble.grid.dt
        rows.append({"value": v, "dt": dt, "status": out.status,
                     "y0": None if y0 is None else [float(x) for x in y0],
                     "se": None if se is None else [float(x) for x in se],
                     "oracle_error": err, "residual_mean_sq": rmsq})
        dts.append(dt)
        errs.append(err)
        res.append(rmsq)
    with open(outdir / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([args.over, "dt", "status", "y0", "se", "oracle_error", "residual_mean_sq"])
        for r in rows:
            w.writerow([r["value"], repr(r["dt"]), r["status"], json.dumps(r["y0"]),
                        json.dumps(r["se"]), repr(r["oracle_error"]), repr(r["residual_mean_sq"])])
    x = dts if args.over == "N" else [1.0 / math.sqrt(v) for v in values]
    slopes = {"oracle_error": _fit_slope(x, errs), "residual_mean_sq": _fit_slope(x, res),
              "against": "dt" if args.over == "N" else "1/sqrt(M)",
              "oracle": "exact" if exact is not None else "reference"}
    (outdir / "sweep.json").write_text(json.dumps({"rows": rows, "slopes": slopes},
                                                  sort_keys=True, indent=2) + "\n")
    print(f"{args.over:>8} {'oracle_error':>14} {'residual_mean_sq':>18}")
    for r in rows:
        print(f"{r['value']:>8} {r['oracle_error']:>14.4e} {r['residual_mean_sq']:>18.4e}")
    print(f"slopes against {slopes['against']}: oracle {slopes['oracle_error']:.3f}, "
          f"residual {slopes['residual_mean_sq']:.3f}")
    return worst


def cmd_oracle(args) -> int:
    cfg = _config_from_args(args)
    out = execute(cfg)
    outdir = Path(cfg.output)
    outdir.mkdir(parents=True, exist_ok=True)
    result = {"scenario": cfg.scenario.name, "status": out.status}
    if out.reference is not None:
        result["reference"] = out.reference.to_dict()
    if out.status == "converged":
        result["nested"] = nested_y0(out, paths=cfg.tolerances.nested_paths,
                                     knots=[0] if args.knot0_only else None)
        result["branching"] = cfg.estimator.branching
    (outdir / "oracle.json").write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")
    print(json.dumps(result, sort_keys=True, indent=2))
    return out.exit_code if out.exit_code == EXIT_DIVERGED else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mbsde", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="YAML or JSON run configuration")
        sp.add_argument("--scenario", help="built-in scenario name (instead of --config)")
        sp.add_argument("--seed", type=int, help="override ensemble.seed")
        sp.add_argument("--out", help="override the output directory")
        sp.add_argument("--route", choices=["auto", "picard", "project", "markovian"])
        sp.add_argument("--paths", type=int, help="override ensemble.M")
        sp.add_argument("--steps", type=int, help="override grid.N")

    sp = sub.add_parser("run", help="solve and write summary, diagnostics and per-knot tables")
    common(sp)
    sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("verify", help="solve and print a table of named checks")
    common(sp)
    sp.add_argument("--nested", action="store_true",
                    help="also compare against the nested estimator")
    sp.set_defaults(func=cmd_verify)
    sp = sub.add_parser("sweep", help="repeat a run over N or M and fit convergence slopes")
    common(sp)
    sp.add_argument("--over", choices=["N", "M"], default="N")
    sp.add_argument("--values", default="16,32,64,128")
    sp.set_defaults(func=cmd_sweep)
    sp = sub.add_parser("oracle", help="nested Monte Carlo reference for a scenario")
    common(sp)
    sp.add_argument("--knot0-only", action="store_true", help="skip the mid-horizon knot")
    sp.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
