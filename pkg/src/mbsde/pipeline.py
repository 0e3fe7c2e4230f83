"""Orchestration behind the command line: one configured run, its checks and its files.

``execute`` builds the problem, samples the ensemble, dispatches to the
route's solver and assembles diagnostics.  ``verify_checks`` turns an
outcome into a table of named checks.  ``write_outputs`` serialises an
outcome deterministically: floats are written with ``repr`` and JSON keys
are sorted, so equal inputs give equal bytes.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .condexp import NestedEstimator
from .config import ConfigError, RunConfig
from .diagnostics import (DiagnosticsReport, build_b4_drift, check_q_bound, check_y_bound,
                          drift_check, estimate_bmo, h2_norm, residual_check, sup_norm)
from .markovian import PdeGrid, export_field, lipschitz_certificate, pde_crosscheck, run_markovian
from .picard import PicardDivergence, phi_nested, solve_global
from .problem import (Markovian, Projectable, Subquadratic, apriori_y_bound, fbsde_q_bound,
                      validate_problem)
from .project import run_projectable
from .simulate import NonFiniteError, TimeGrid, sample_brownian, stochastic_exponential

__all__ = [
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_DIVERGED",
    "EXIT_BOUND",
    "Outcome",
    "Check",
    "resolve_route",
    "execute",
    "verify_checks",
    "write_outputs",
    "write_checks",
    "nested_y0",
]

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_BOUND = 0, 1, 2, 3


def resolve_route(config: RunConfig, problem) -> tuple[str, str]:
    """``(route, policy)`` for a configuration; raises :class:`ConfigError` on a mismatch.

    ``auto`` follows the structure: Markovian problems take the decoupling
    route, projectable ones the projection route and everything else the
    Picard engine with the scenario's window policy.  An explicit ``picard``
    route without an explicit policy uses the horizon rule, which needs a
    subquadratic certificate.
    """
    s = problem.structure
    sc = config.scenario
    policy = config.tolerances.policy
    route = config.route
    if route == "auto":
        if isinstance(s, Markovian):
            route = "markovian"
        elif isinstance(s, Projectable):
            route = "project"
        else:
            route = "picard"
        if policy is None:
            policy = sc.policy
    elif policy is None:
        policy = "global" if route == "picard" else sc.policy

    if route == "markovian" and not isinstance(s, Markovian):
        raise ConfigError(f"route 'markovian' needs a Markovian structure (F, G, h); problem "
                          f"{problem.name!r} declares {s.kind!r}")
    if route == "project" and not isinstance(s, Projectable):
        raise ConfigError(f"route 'project' needs a projectable structure (a, P, Q, R); problem "
                          f"{problem.name!r} declares {s.kind!r}")
    if policy in ("global", "running") and not isinstance(s, Subquadratic):
        raise ConfigError(
            f"route {route!r} with window policy {policy!r} needs a subquadratic certificate "
            f"(C, eps, rho); problem {problem.name!r} declares {s.kind!r}. Set "
            "tolerances.policy to 'adaptive' or 'fixed' to run without one")
    if policy == "fixed" and config.tolerances.steps_per_window is None:
        raise ConfigError("window policy 'fixed' needs tolerances.steps_per_window")
    return route, policy


@dataclass
class Check:
    name: str
    condition: str
    threshold: object
    observed: object
    passes: bool

    def row(self):
        return [self.name, self.condition, _fmt(self.threshold), _fmt(self.observed),
                "pass" if self.passes else "FAIL"]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


@dataclass(eq=False)
class Outcome:
    config: RunConfig
    problem: object
    ensemble: object
    route: str
    policy: str
    status: str
    exit_code: int
    message: str = ""
    solution: object = None
    reports: list = field(default_factory=list)
    diagnostics: Optional[DiagnosticsReport] = None
    reference: object = None
    route_report: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    regressor: object = None

    @property
    def y0(self):
        if self.solution is None:
            return None, None
        return self.solution.y0()

    def oracle(self) -> Optional[dict]:
        if self.reference is None or self.solution is None:
            return None
        y0, se = self.y0
        tol = self.config.tolerances
        sc = self.config.scenario
        comb = np.sqrt(np.asarray(se) ** 2 + np.asarray(self.reference.se) ** 2)
        if tol.oracle_tol is not None:
            threshold = np.full_like(comb, tol.oracle_tol)
        else:
            threshold = tol.se_mult * comb + sc.abs_tol
        gap = np.abs(np.asarray(y0) - np.asarray(self.reference.y0))
        return {"reference": self.reference.to_dict(), "gap": gap.tolist(),
                "threshold": threshold.tolist(), "passes": bool(np.all(gap <= threshold))}


def _bound_constant(problem) -> Optional[float]:
    s = problem.structure
    if isinstance(s, (Subquadratic, Projectable)):
        return float(s.C)
    if isinstance(s, Markovian):
        return None
    return problem.terminal_bound


def _bound_curve(problem, t) -> np.ndarray:
    s = problem.structure
    if isinstance(s, Markovian):
        if s.growth_constant is None:
            return np.full(len(t), math.nan)
        return np.full(len(t), math.sqrt(fbsde_q_bound(s.growth_constant, problem.T)[1]))
    C = _bound_constant(problem)
    if C is None:
        return np.full(len(t), math.nan)
    return np.atleast_1d(apriori_y_bound(C, problem.T, np.asarray(t)))


def execute(config: RunConfig) -> Outcome:
    """Run the configured pipeline; configuration problems raise :class:`ConfigError`."""
    sc = config.scenario
    try:
        problem = sc.build(**config.params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"problem {sc.name!r}: {exc}") from None
    route, policy = resolve_route(config, problem)
    grid = TimeGrid(problem.T, config.grid.N)
    ens = sample_brownian(grid, config.ensemble.M, problem.n, config.ensemble.seed)
    tol = config.tolerances
    estimator = config.estimator.regression(sc.basis)
    out = Outcome(config, problem, ens, route, policy, "running", EXIT_OK)
    out.reference = sc.reference_value(ens, **config.params)

    try:
        if route == "picard":
            regressor = estimator.bind(ens)
            out.regressor = regressor
            sol, reports = solve_global(problem, ens, policy, tol.picard_tol, tol.max_iter,
                                        regressor=regressor,
                                        steps_per_window=tol.steps_per_window,
                                        ratio_cap=tol.ratio_cap)
            out.solution = sol
            out.reports = [r.to_dict() for r in reports]
        elif route == "project":
            res = run_projectable(problem, ens, estimator, tol.picard_tol, tol.max_iter, policy,
                                  tol.steps_per_window)
            out.solution = res["gamma"]
            out.regressor = res["regressor"]
            out.reports = [r.to_dict() | {"stage": "scalar"} for r in res["scalar"].reports]
            out.route_report = res["report"]
            out.extras = {"measure": res["measure"], "coefficients": res["coefficients"],
                          "scalar": res["scalar"]}
        else:
            res = run_markovian(problem, ens, estimator, tol.outer_tol, tol.max_outer,
                                tol.picard_tol)
            fb = res["result"]
            out.solution = res["bsde"]
            out.regressor = estimator.bind(ens)
            out.reports = [r.to_dict() | {"outer": i + 1}
                           for i, reps in enumerate(fb.reports) for r in reps]
            out.route_report = res["report"]
            out.extras = {"fbsde": fb, "weight": res["weight"]}
            if not fb.converged:
                out.status = "diverged"
                out.exit_code = EXIT_DIVERGED
                out.message = (f"decoupling field did not converge in {tol.max_outer} outer "
                               f"iterations (last delta {fb.deltas[-1]:.3g} > {tol.outer_tol})")
                return out
    except PicardDivergence as exc:
        out.status = "diverged"
        out.exit_code = EXIT_DIVERGED
        out.message = str(exc)
        out.reports = [r.to_dict() for r in exc.reports]
        if exc.report is not None and exc.report not in exc.reports:
            out.reports.append(exc.report.to_dict())
        return out
    except (NonFiniteError, FloatingPointError) as exc:
        out.status = "diverged"
        out.exit_code = EXIT_DIVERGED
        out.message = str(exc)
        return out

    out.status = "converged"
    out.diagnostics = _diagnostics(out)
    if not out.diagnostics.passes:
        out.exit_code = EXIT_BOUND
        failed = [v.name for v in out.diagnostics.verdicts if not v.passes]
        failed += [d.name for d in out.diagnostics.drift if not d.passes]
        out.message = f"bound or measure checks failed: {', '.join(failed)}"
    return out


def _diagnostics(out: Outcome) -> DiagnosticsReport:
    problem, ens, sol = out.problem, out.ensemble, out.solution
    tol = out.config.tolerances
    s = problem.structure
    dt = ens.grid.dt
    rep = DiagnosticsReport(sup_norm(sol.Y), h2_norm(sol.Z, dt),
                            estimate_bmo(sol.Z, dt, out.regressor), ens.M)
    if isinstance(s, Subquadratic):
        rep.verdicts.append(check_y_bound(sol, s.C, problem.T, ens.grid.t, tol.bound_slack,
                                          tol.se_mult))
        _, weight = build_b4_drift(sol.Y, sol.Z, s.rho, ens)
        rep.drift.append(drift_check("b4_drift", weight, tol.se_mult))
    elif isinstance(s, Markovian):
        fb = out.extras["fbsde"]
        if s.growth_constant is not None:
            rep.verdicts.append(check_q_bound(fb.solution.Y, s.growth_constant, problem.T,
                                              tol.bound_slack))
        rep.drift.append(drift_check("forward_measure", out.extras["weight"], tol.se_mult))
    elif isinstance(s, Projectable) and "coefficients" in out.extras:
        weight = stochastic_exponential(ens, out.extras["coefficients"].R)
        rep.drift.append(drift_check("projection_measure", weight, tol.se_mult))
    rep.residuals = residual_check(problem, sol, ens, tol.se_mult)
    return rep


# --------------------------------------------------------------------------
# Nested cross-check
# --------------------------------------------------------------------------

def nested_y0(out: Outcome, estimator: Optional[NestedEstimator] = None, paths: int = 20,
              knots=None, solution=None) -> list[dict]:
    """``phi`` of the solution by resimulated suffixes, against the regression values.

    At knot 0 every path shares the state, so one conditioning path suffices
    and ``B`` suffixes give the estimate.  At later knots ``paths``
    conditioning paths are used; the regression side is the mean of ``Y_k``
    over them and the nested side the mean of the nested estimates.  The
    combined SE adds the SE of the nested mean to the average pointwise SE
    of the fitted values (knot 0: the knot-mean SE).
    """
    est = estimator or out.config.estimator.nested()
    sol = out.solution if solution is None else solution
    ens = out.ensemble
    problem = out.problem
    if not sol.tables:
        raise ValueError("the solution carries no fitted state functions for suffix evaluation")
    knots = [0, ens.N // 2] if knots is None else knots
    rows = []
    for k in knots:
        idx = np.arange(1) if k == 0 else np.linspace(0, ens.M - 1, paths).astype(int)
        res = phi_nested(problem, sol, ens, k, idx, est)
        nested = np.asarray(res.values).reshape(len(idx), problem.d)
        nse = np.asarray(res.pointwise_se).reshape(len(idx), problem.d)
        reg = sol.Y[idx, k]
        if k == 0:
            rse = np.asarray(sol.y_se[0])
        else:
            # fitted-value errors at nearby states are correlated: average, do not shrink
            tab = sol.tables.get(k)
            fit = None if tab is None else tab.fit
            if fit is None or getattr(fit, "value_cov", None) is None:
                rse = np.asarray(sol.y_se[k]) * math.sqrt(ens.M)
            else:
                rse = fit.value_se(ens.W[idx, k]).mean(axis=0)
        gap = np.abs(nested.mean(axis=0) - reg.mean(axis=0))
        comb = np.sqrt(np.mean(nse ** 2, axis=0) / len(idx) + rse ** 2)
        rows.append({"knot": int(k), "paths": int(len(idx)), "nested": nested.mean(axis=0).tolist(),
                     "regression": reg.mean(axis=0).tolist(), "gap": gap.tolist(),
                     "combined_se": comb.tolist()})
    return rows


# --------------------------------------------------------------------------
# Verification table
# --------------------------------------------------------------------------

def verify_checks(out: Outcome, nested: bool = False) -> list[Check]:
    cfg = out.config
    tol = cfg.tolerances
    problem = out.problem
    s = problem.structure
    checks: list[Check] = []

    val = validate_problem(problem, samples=2000, seed=cfg.ensemble.seed)
    for c in val.conditions:
        checks.append(Check(f"structure:{c.name}", "sampled margin <= 0", 0.0, c.max_margin,
                            c.passes))
    if isinstance(s, Markovian):
        lip = lipschitz_certificate(problem, 2000, cfg.ensemble.seed)
        if lip["declared"] is not None:
            checks.append(Check("lipschitz", "sampled constant <= declared", lip["declared"],
                                lip["max_constant"], bool(lip["passes"])))

    checks.append(Check("solver", "converged", "converged", out.status, out.status == "converged"))
    if out.status != "converged":
        return checks

    diag = out.diagnostics
    for v in diag.verdicts:
        worst = int(np.argmin(v.slack))
        checks.append(Check(f"bound:{v.name}", "max observed <= bound x (1+slack) + k SE",
                            v.observed[worst] + v.slack[worst], v.observed[worst], v.passes))
    for d in diag.drift:
        checks.append(Check(f"measure:{d.name}", f"|mean weight - 1| <= {tol.se_mult} SE",
                            tol.se_mult * d.se, abs(d.mean_weight - 1.0), d.passes))

    if out.route == "picard" and out.policy in ("global", "running"):
        ratios = [x for r in out.reports for x in r["ratios"]]
        worst = max(ratios) if ratios else 0.0
        checks.append(Check("contraction", "max iteration ratio <= cap", tol.ratio_cap, worst,
                            worst <= tol.ratio_cap))

    orc = out.oracle()
    if orc is not None:
        gap = orc["gap"]
        thr = orc["threshold"]
        i = int(np.argmax(np.asarray(gap) - np.asarray(thr)))
        checks.append(Check("oracle:y0", f"|Y0 - {orc['reference']['kind']}| <= threshold",
                            thr[i], gap[i], orc["passes"]))

    if out.route == "project":
        rr = out.route_report
        for key in ("consistency_gamma", "consistency_measure"):
            c = rr[key]
            ratio = max(np.asarray(c["knot_mean_diff"]) /
                        np.maximum(np.asarray(c["combined_se"]), 1e-300))
            checks.append(Check(f"projection:{key.split('_')[1]}",
                                "|mean(a'Y) - mean(U)| <= k combined SE at every knot",
                                c["se_mult"], float(ratio), c["passes"]))
        ag = rr["route_agreement"]
        checks.append(Check("route_agreement", "|Y gamma - Y measure| <= k combined SE",
                            ag["se_mult"], ag["max_gap_in_se"], ag["passes"]))

    if out.route == "markovian":
        rr = out.route_report
        if problem.n == 1:
            fb = out.extras["fbsde"]
            pde = PdeGrid(L=max(5.0, 8.0 * math.sqrt(problem.T)), dx=0.01, n=1)
            _, cmp_ = pde_crosscheck(problem, fb.field, out.ensemble, pde)
            worst = max(cmp_["knots"], key=lambda r: r["gap"] / r["allowed"])
            checks.append(Check("pde_agreement", "max gap <= 5 x (FD truncation + SE)",
                                worst["allowed"], worst["gap"], cmp_["passes"]))

    if nested:
        sol = out.solution
        if not sol.tables:
            # routes without fitted state functions: compare on the Picard field instead
            sol, _ = solve_global(problem, out.ensemble, "adaptive", tol.picard_tol, tol.max_iter,
                                  regressor=out.regressor, ratio_cap=tol.ratio_cap)
        for row in nested_y0(out, paths=tol.nested_paths, solution=sol):
            gap = np.asarray(row["gap"])
            thr = tol.se_mult * np.asarray(row["combined_se"])
            i = int(np.argmax(gap - thr))
            checks.append(Check(f"backends:knot{row['knot']}",
                                "|nested - regression| <= k combined SE", float(thr[i]),
                                float(gap[i]), bool(np.all(gap <= thr))))
    return checks


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------

def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n")


def summary_dict(out: Outcome) -> dict:
    y0, se = out.y0
    return {
        "scenario": out.config.scenario.name,
        "problem": out.problem.name,
        "params": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in out.config.scenario.merged(out.config.params).items()},
        "route": out.route,
        "policy": out.policy,
        "status": out.status,
        "exit_code": out.exit_code,
        "message": out.message,
        "paths": out.ensemble.M,
        "steps": out.ensemble.N,
        "seed": out.config.ensemble.seed,
        "y0": None if y0 is None else [float(v) for v in y0],
        "se": None if se is None else [float(v) for v in se],
        "oracle": out.oracle(),
        # the output directory is left out so that reruns elsewhere compare equal
        "config": {k: v for k, v in out.config.to_dict().items() if k != "output"},
    }


def knot_rows(out: Outcome):
    sol = out.solution
    t = out.ensemble.grid.t
    d = sol.d
    head = ["t"] + (["mean_Y"] if d == 1 else [f"mean_Y_{i + 1}" for i in range(d)]) + [
        "max_abs_Y", "bound_phi", "mean_abs_Z"]
    rows = [head]
    bound = _bound_curve(out.problem, t)
    meanY = sol.Y.mean(axis=0)
    maxY = np.sqrt(np.max(np.sum(sol.Y ** 2, axis=2), axis=0))
    zabs = np.sqrt(np.sum(sol.Z ** 2, axis=(2, 3))).mean(axis=0)
    for k in range(len(t)):
        z = zabs[k] if k < len(zabs) else math.nan
        rows.append([repr(float(t[k]))] + [repr(float(v)) for v in meanY[k]]
                    + [repr(float(maxY[k])), repr(float(bound[k])), repr(float(z))])
    return rows


def write_outputs(out: Outcome, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _dump(d / "summary.json", summary_dict(out))
    with open(d / "picard_reports.jsonl", "w") as fh:
        for r in out.reports:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    if out.solution is not None and out.status == "converged":
        diag = out.diagnostics.to_dict() if out.diagnostics is not None else {}
        diag["route"] = out.route_report
        _dump(d / "diagnostics.json", diag)
        with open(d / "knots.csv", "w", newline="") as fh:
            csv.writer(fh).writerows(knot_rows(out))
        if out.route == "markovian":
            export_field(d / "field.csv", out.extras["fbsde"].field)
    return d


def write_checks(checks: list[Check], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "condition", "threshold", "observed", "verdict"])
        for c in checks:
            w.writerow(c.row())


def format_table(checks: list[Check]) -> str:
    rows = [["check", "condition", "threshold", "observed", "verdict"]] + [c.row() for c in checks]
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def silence_warnings():
    """Runtime warnings go to the log, not stderr noise, during batch runs."""
    warnings.simplefilter("default", RuntimeWarning)
