"""Solver for projectable drivers.

Pipeline: solve the one-dimensional BSDE for ``U = a'Y`` with driver
``a'P + u Q + v R``; freeze ``P, Q, R`` along ``(U, V)``; solve the resulting
linear vector BSDE twice (through the linear SDE ``Gamma`` and through a
change of measure); check that ``a'Y`` reproduces ``U``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .condexp import KnotRegressor, RegressionEstimator
from .picard import PicardReport, SolutionField, solve_global
from .problem import BsdeProblem, Projectable, projected_scalar_driver
from .simulate import PathEnsemble, euler_gamma, girsanov_shift, stochastic_exponential

__all__ = [
    "ScalarSolution",
    "FrozenCoefficients",
    "scalar_problem",
    "solve_scalar_quadratic",
    "cole_hopf",
    "freeze_coefficients",
    "solve_linear_via_gamma",
    "solve_linear_via_measure",
    "projection_consistency",
    "run_projectable",
]

GAMMA_FLOOR = 1e-300


def _projectable(problem: BsdeProblem) -> Projectable:
    if not isinstance(problem.structure, Projectable):
        raise ValueError(f"problem {problem.name!r} is not declared projectable")
    return problem.structure


@dataclass(eq=False)
class ScalarSolution:
    """``U`` is ``(M, N+1)``, ``V`` is ``(M, N, n)``."""

    U: np.ndarray
    V: np.ndarray
    u_se: np.ndarray
    reports: list = field(default_factory=list)
    field: Optional[SolutionField] = None

    @classmethod
    def from_field(cls, fld: SolutionField, reports=()):
        return cls(fld.Y[:, :, 0], fld.Z[:, :, 0, :], fld.y_se[:, 0], list(reports), fld)


@dataclass(eq=False)
class FrozenCoefficients:
    """``P`` is ``(M, N, d)``, ``Q`` is ``(M, N)``, ``R`` is ``(M, N, n)``."""

    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    growth: dict = field(default_factory=dict)


def scalar_problem(problem: BsdeProblem) -> BsdeProblem:
    """The one-dimensional problem solved by ``U = a'Y``."""
    s = _projectable(problem)
    a = s.a

    def terminal(paths):
        return (np.asarray(problem.terminal(paths), dtype=float) @ a)[:, None]

    def driver(t, prefix, u, v):
        return projected_scalar_driver(s, t, prefix, u[:, 0], v[:, 0, :])[:, None]

    return BsdeProblem(1, problem.n, problem.T, terminal, driver, name=f"{problem.name}:scalar")


def solve_scalar_quadratic(problem: BsdeProblem, ensemble: PathEnsemble, tol: float = 1e-6,
                           max_iter: int = 50, estimator: Optional[RegressionEstimator] = None,
                           regressor: Optional[KnotRegressor] = None, policy: str = "adaptive",
                           steps_per_window: Optional[int] = None) -> ScalarSolution:
    """Windowed Picard for ``U``; windows are halved until the measured contraction holds.

    Raises :class:`~mbsde.picard.PicardDivergence` as the Picard solver does.
    """
    sp = scalar_problem(problem)
    fld, reports = solve_global(sp, ensemble, policy=policy, tol=tol, max_iter=max_iter,
                                estimator=estimator, regressor=regressor,
                                steps_per_window=steps_per_window)
    return ScalarSolution.from_field(fld, reports)


def cole_hopf(values: np.ndarray, gamma: float, regressor: Optional[KnotRegressor] = None):
    """Exponential transform for the pure quadratic driver ``(gamma/2)|v|^2``.

    With ``values`` the terminal payload ``(M,)``: returns ``(U_0, se)`` where
    ``U_0 = log(E e^{gamma xi}) / gamma`` and ``se`` is the delta-method error.
    With a ``regressor`` also returns the knot-wise ``U`` along the ensemble,
    ``U_k = log(E_k e^{gamma xi}) / gamma``.
    """
    if gamma == 0:
        raise ValueError("gamma must be nonzero")
    xi = np.asarray(values, dtype=float).reshape(-1)
    shift = float(np.max(gamma * xi))
    e = np.exp(gamma * xi - shift)
    m = float(e.mean())
    u0 = (math.log(m) + shift) / gamma
    se = float(e.std(ddof=1) / math.sqrt(len(e)) / (abs(gamma) * m))
    if regressor is None:
        return u0, se
    N = regressor.ensemble.N
    U = np.empty((len(xi), N + 1))
    U[:, N] = xi
    for k in range(N):
        cond = regressor.project(k, e).values
        U[:, k] = (np.log(np.clip(cond, 1e-300, None)) + shift) / gamma
    return u0, se, U


# --------------------------------------------------------------------------
# Frozen linear problem
# --------------------------------------------------------------------------

def freeze_coefficients(problem: BsdeProblem, scalar: ScalarSolution,
                        ensemble: PathEnsemble) -> FrozenCoefficients:
    """Evaluate ``P, Q, R`` along ``(t_k, U_k, V_k)`` and sample their growth conditions."""
    s = _projectable(problem)
    M, N, n = ensemble.M, ensemble.N, ensemble.n
    t = ensemble.grid.t
    d = problem.d
    P = np.empty((M, N, d))
    Q = np.empty((M, N))
    R = np.empty((M, N, n))
    for k in range(N):
        prefix = ensemble.W[:, : k + 1, :]
        u, v = scalar.U[:, k], scalar.V[:, k]
        P[:, k] = np.asarray(s.P(t[k], prefix, u, v), dtype=float).reshape(M, d)
        Q[:, k] = np.asarray(s.Q(t[k], prefix, u, v), dtype=float).reshape(M)
        R[:, k] = np.asarray(s.R(t[k], prefix, u, v), dtype=float).reshape(M, n)
    for name, arr in (("P", P), ("Q", Q), ("R", R)):
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"frozen coefficient {name} is not finite")
    C = s.C
    absU = np.abs(scalar.U[:, :N])
    absV = np.sqrt(np.sum(scalar.V ** 2, axis=2))
    growth = {
        "P": float(np.max(np.sqrt(np.sum(P ** 2, axis=2)) - C * (1 + absU))),
        "Q": float(np.max(np.abs(Q) - C)),
        "R": float(np.max(np.sqrt(np.sum(R ** 2, axis=2)) - C - s.rho(absU) * absV)),
    }
    bad = [k for k, v in growth.items() if v > 0]
    if bad:
        warnings.warn(f"sampled growth condition violated for {', '.join(bad)}: "
                      f"{ {k: growth[k] for k in bad} }", RuntimeWarning)
    return FrozenCoefficients(P, Q, R, growth)


def _linear_sweep(regressor: KnotRegressor, xi: np.ndarray, scale: np.ndarray,
                  P: np.ndarray, dt: float, increments=None, weights_at=None):
    """Backward sweep for ``Y_k = E_k[S_{k+1}] / scale_k + P_k dt``.

    ``S_{k+1} = scale_N xi + sum_{j>k} scale_j P_j dt``; the slope of
    ``S_{k+1} / scale_k`` on the (possibly shifted) increments is returned as
    the raw integrand.  ``weights_at(k)`` switches to weighted fits.
    """
    ens = regressor.ensemble
    M, N = scale.shape[0], scale.shape[1] - 1
    d, n = xi.shape[1], ens.n
    Y = np.empty((M, N + 1, d))
    eta = np.empty((M, N, d, n))
    se = np.empty((N + 1, d))
    Y[:, N] = xi
    S = scale[:, N, None] * xi
    se[N] = _se(xi)
    control = np.zeros_like(S)
    for k in range(N - 1, -1, -1):
        inc = ens.dW[:, k, :] if increments is None else increments[:, k, :]
        w = None if weights_at is None else weights_at(k)
        target = (S - control) / scale[:, k, None]
        fit = regressor.joint(k, target, increments=None if increments is None else inc, weights=w)
        Y[:, k] = fit.values + P[:, k] * dt
        eta[:, k] = fit.Z
        S = S + scale[:, k, None] * P[:, k] * dt
        raw = S / scale[:, k, None]
        se[k] = _se(raw if w is None else raw * w[:, None])
        control += scale[:, k, None] * fit.martingale_increment(inc)
    return Y, eta, se


def _se(x):
    return x.std(axis=0, ddof=1) / math.sqrt(x.shape[0])


def solve_linear_via_gamma(regressor: KnotRegressor, coeffs: FrozenCoefficients,
                           xi: np.ndarray) -> SolutionField:
    """``Gamma_t Y_t = E_t[Gamma_T xi + int Gamma P]`` with ``dGamma = Gamma (Q dt + R' dW)``.

    ``Z`` is recovered from the integrand of the martingale through
    ``Gamma (Y R' + Z)``.
    """
    ens = regressor.ensemble
    logG = euler_gamma(ens, coeffs.Q, coeffs.R, log=True)
    if np.min(logG) < math.log(GAMMA_FLOOR):
        raise FloatingPointError("Gamma underflowed below 1e-300: coefficient blow-up")
    # rescaling by a constant keeps every ratio and avoids overflow
    G = np.exp(logG - np.max(logG))
    xi = np.asarray(xi, dtype=float)
    Y, eta, se = _linear_sweep(regressor, xi, G, coeffs.P, ens.grid.dt)
    Z = eta - np.einsum("mkd,mkn->mkdn", Y[:, :-1], coeffs.R)
    return SolutionField(Y, Z, (0, ens.N), "gamma", se)


def solve_linear_via_measure(regressor: KnotRegressor, coeffs: FrozenCoefficients,
                             xi: np.ndarray, ess_floor: float = 0.1) -> SolutionField:
    """Discounted representation under the measure with density ``E(int R' dW)_T``.

    ``Y_k = E~_k[e^{int_k^T Q} xi + sum_j e^{int_k^j Q} P_j dt]`` with ``E~``
    realised by weighted least squares (weights ``E_T / E_k``) on the original
    paths, and ``Z`` the slope against the shifted increments ``dW - R dt``.
    """
    ens = regressor.ensemble
    dt = ens.grid.dt
    weight = stochastic_exponential(ens, coeffs.R)
    shifted = girsanov_shift(ens, weight)
    logD = np.zeros((ens.M, ens.N + 1))
    np.cumsum(coeffs.Q * dt, axis=1, out=logD[:, 1:])
    D = np.exp(logD - np.max(logD))
    low = []

    def weights_at(k):
        w = weight.ratio(k)
        ess = float(w.sum() ** 2 / np.sum(w * w))
        if ess < ess_floor * len(w):
            low.append((k, ess))
        return w

    Y, Z, se = _linear_sweep(regressor, np.asarray(xi, dtype=float), D, coeffs.P, dt,
                             increments=shifted.dW, weights_at=weights_at)
    if low:
        k, ess = min(low, key=lambda p: p[1])
        warnings.warn(f"effective sample size fell to {ess:.1f} of {ens.M} paths (knot {k})",
                      RuntimeWarning)
    return SolutionField(Y, Z, (0, ens.N), "measure", se)


@dataclass
class ConsistencyReport:
    max_abs_diff: float
    z_gap: float
    knot_mean_diff: list
    combined_se: list
    passes: bool
    se_mult: float = 3.0

    def to_dict(self):
        return {
            "max_abs_diff": self.max_abs_diff,
            "z_gap": self.z_gap,
            "knot_mean_diff": self.knot_mean_diff,
            "combined_se": self.combined_se,
            "passes": self.passes,
            "se_mult": self.se_mult,
        }


def projection_consistency(solution: SolutionField, scalar: ScalarSolution, a, dt: float,
                           se_mult: float = 3.0, atol: float = 1e-12) -> ConsistencyReport:
    """Compare ``a'Y`` with ``U`` and ``a'Z`` with ``V``.

    Reports the pathwise maximum gap, the time-integrated mean ``|a'Z - V|^2``
    and, per knot, the gap of the means against ``se_mult`` combined standard
    errors (the pass criterion).
    """
    a = np.asarray(a, dtype=float)
    aY = solution.Y @ a
    aZ = np.einsum("d,mkdn->mkn", a, solution.Z)
    diff = aY - scalar.U
    zgap = float(np.mean(np.sum((aZ - scalar.V) ** 2, axis=(1, 2))) * dt)
    se_y = np.sqrt(np.asarray(solution.y_se) ** 2 @ (a * a))
    comb = np.sqrt(se_y ** 2 + scalar.u_se ** 2)
    mean_diff = np.abs(diff.mean(axis=0))
    ok = bool(np.all(mean_diff <= se_mult * comb + atol))
    return ConsistencyReport(float(np.max(np.abs(diff))), zgap, mean_diff.tolist(),
                             comb.tolist(), ok, se_mult)


def route_agreement(first: SolutionField, second: SolutionField, se_mult: float = 3.0,
                    atol: float = 1e-12) -> dict:
    """Knot-wise gap of the mean ``Y`` between two solutions, in combined SEs."""
    gap = np.abs(first.Y.mean(axis=0) - second.Y.mean(axis=0))
    comb = np.sqrt(np.asarray(first.y_se) ** 2 + np.asarray(second.y_se) ** 2)
    return {
        "max_gap": float(np.max(gap)),
        "max_gap_in_se": float(np.max(gap / np.where(comb > 0, comb, np.inf))),
        "passes": bool(np.all(gap <= se_mult * comb + atol)),
        "se_mult": se_mult,
    }


def run_projectable(problem: BsdeProblem, ensemble: PathEnsemble,
                    estimator: Optional[RegressionEstimator] = None, tol: float = 1e-6,
                    max_iter: int = 50, policy: str = "adaptive",
                    steps_per_window: Optional[int] = None) -> dict:
    """Staged pipeline; returns every intermediate object and a JSON-ready report."""
    s = _projectable(problem)
    regressor = (estimator or RegressionEstimator()).bind(ensemble)
    scalar = solve_scalar_quadratic(problem, ensemble, tol, max_iter, regressor=regressor,
                                    policy=policy, steps_per_window=steps_per_window)
    coeffs = freeze_coefficients(problem, scalar, ensemble)
    xi = np.asarray(problem.terminal(ensemble.W), dtype=float).reshape(ensemble.M, problem.d)
    gamma_sol = solve_linear_via_gamma(regressor, coeffs, xi)
    measure_sol = solve_linear_via_measure(regressor, coeffs, xi)
    dt = ensemble.grid.dt
    cons_g = projection_consistency(gamma_sol, scalar, s.a, dt)
    cons_m = projection_consistency(measure_sol, scalar, s.a, dt)
    agree = route_agreement(gamma_sol, measure_sol)
    report = {
        "scalar": {"U0": float(scalar.U[:, 0].mean()), "se": float(scalar.u_se[0]),
                   "reports": [r.to_dict() for r in scalar.reports]},
        "freeze": {"growth_margins": coeffs.growth},
        "gamma": {"Y0": gamma_sol.Y[:, 0].mean(axis=0).tolist(), "se": gamma_sol.y_se[0].tolist()},
        "measure": {"Y0": measure_sol.Y[:, 0].mean(axis=0).tolist(),
                    "se": measure_sol.y_se[0].tolist()},
        "route_agreement": agree,
        "consistency_gamma": cons_g.to_dict(),
        "consistency_measure": cons_m.to_dict(),
    }
    return {
        "scalar": scalar, "coefficients": coeffs, "gamma": gamma_sol, "measure": measure_sol,
        "consistency": (cons_g, cons_m), "agreement": agree, "report": report,
        "regressor": regressor,
    }
