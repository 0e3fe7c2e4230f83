"""Forward-backward systems with state-function decoupling fields.

``dP = G(t, P, Q, R) dt + dW``, ``dQ = -F(t, P, Q, R) dt + R dW``,
``Q_T = h(P_T)``, solved by iterating on the decoupling field
``(q_k, r_k)``: simulate ``P`` with the drift frozen at the current field,
solve the backward equation along ``P`` and refit.  The converged field,
evaluated along the original Brownian paths, solves the BSDE with driver
``F(t, W, y, z) + z G(t, W, y, z)``.

An explicit finite-difference solver for the associated semilinear PDE
provides an independent check in one or two space dimensions.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .condexp import RegressionEstimator
from .diagnostics import check_q_bound, drift_check
from .picard import PicardDivergence, SolutionField, solve_global
from .problem import BsdeProblem, Markovian, fbsde_q_bound
from .simulate import PathEnsemble, euler_forward, stochastic_exponential

__all__ = [
    "DecouplingField",
    "FbsdeResult",
    "PdeGrid",
    "PdeResult",
    "solve_fbsde_decoupling",
    "fbsde_to_bsde",
    "gradient_check",
    "pde_solve",
    "pde_crosscheck",
    "lipschitz_certificate",
    "export_field",
    "export_pde",
]


def _markovian(problem: BsdeProblem) -> Markovian:
    if not isinstance(problem.structure, Markovian):
        raise ValueError(f"problem {problem.name!r} is not declared Markovian")
    return problem.structure


@dataclass(eq=False)
class DecouplingField:
    """Per-knot fitted ``q_k(x)`` (``d``-vector) and ``r_k(x)`` (``d x n``)."""

    tables: dict
    N: int
    d: int
    n: int
    h: object
    ranges: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def q(self, k: int, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.n)
        if k == self.N:
            return np.asarray(self.h(x), dtype=float).reshape(len(x), self.d)
        if k not in self.tables:
            return np.zeros((len(x), self.d))
        return self.tables[k].y(x)

    def r(self, k: int, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.n)
        if k not in self.tables:
            return np.zeros((len(x), self.d, self.n))
        return self.tables[k].z(x)

    def q_se(self, k: int, x: np.ndarray) -> np.ndarray:
        """Pointwise regression standard error of ``q_k``."""
        x = np.asarray(x, dtype=float).reshape(-1, self.n)
        tab = self.tables.get(k)
        if tab is None or tab.fit is None or tab.fit.value_cov is None:
            return np.zeros((len(x), self.d))
        return tab.fit.value_se(x)


def _field_on(fieldobj: Optional[DecouplingField], W: np.ndarray, d: int):
    M, K, n = W.shape
    if fieldobj is None:
        return np.zeros((M, K, d)), np.zeros((M, K - 1, d, n))
    Y = np.stack([fieldobj.q(k, W[:, k]) for k in range(K)], axis=1)
    Z = np.stack([fieldobj.r(k, W[:, k]) for k in range(K - 1)], axis=1)
    return Y, Z


@dataclass(eq=False)
class FbsdeResult:
    forward: np.ndarray
    solution: SolutionField
    field: DecouplingField
    outer_iterations: int
    deltas: list
    converged: bool
    reports: list
    bsde: Optional[SolutionField] = None

    def to_dict(self):
        return {
            "outer_iterations": self.outer_iterations,
            "field_deltas": [float(x) for x in self.deltas],
            "converged": self.converged,
            "inner_reports": [[r.to_dict() for r in reps] for reps in self.reports],
        }


def _backward_problem(problem: BsdeProblem, s: Markovian, P: np.ndarray) -> BsdeProblem:
    """BSDE along the forward paths ``P``: terminal ``h(P_N)``, driver ``F(t, P_k, y, z)``."""
    d = problem.d

    def terminal(paths):
        return np.asarray(s.h(P[:, -1, :]), dtype=float).reshape(P.shape[0], d)

    def driver(t, prefix, y, z):
        k = prefix.shape[1] - 1
        return np.asarray(s.F(t, P[:, k, :], y, z), dtype=float).reshape(y.shape)

    return BsdeProblem(d, problem.n, problem.T, terminal, driver, name=f"{problem.name}:backward")


def solve_fbsde_decoupling(problem: BsdeProblem, ensemble: PathEnsemble, tol: float = 1e-4,
                           max_outer: int = 30, estimator: Optional[RegressionEstimator] = None,
                           inner_tol: float = 1e-6, inner_max_iter: int = 50,
                           policy: str = "adaptive") -> FbsdeResult:
    """Decoupling-field iteration.

    Outer step ``i``: drift ``G(t, x, q^i(x), r^i(x))`` (``q^0 = r^0 = 0``),
    forward Euler paths ``P``, the backward equation solved along ``P`` by the
    Picard engine, and the refitted field ``q^{i+1}``.  The field delta is
    the sup over knots and paths of ``|q^{i+1} - q^i|`` evaluated on the
    original Brownian states.  If the forward paths do not move, the next
    solve would repeat the last one exactly, and the loop stops.
    """
    s = _markovian(problem)
    estimator = estimator or RegressionEstimator()
    grid = ensemble.grid
    C = s.growth_constant
    blowup = None if C is None else 10.0 * fbsde_q_bound(C, problem.T)[1]
    fld: Optional[DecouplingField] = None
    prev_P = None
    deltas, reports = [], []
    result = None
    for it in range(1, max_outer + 1):
        current = fld

        def drift(t, x, k, current=current):
            if current is None:
                y = np.zeros((x.shape[0], problem.d))
                z = np.zeros((x.shape[0], problem.d, problem.n))
            else:
                y, z = current.q(k, x), current.r(k, x)
            return s.G(t, x, y, z)

        P = euler_forward(ensemble, drift, np.zeros(problem.n))
        if prev_P is not None and np.array_equal(P, prev_P):
            deltas.append(0.0)
            return FbsdeResult(result.forward, result.solution, result.field, it - 1, deltas[:-1],
                               True, reports)
        regressor = estimator.bind(ensemble, states=P)
        back = _backward_problem(problem, s, P)
        try:
            sol, reps = solve_global(back, ensemble, policy=policy, tol=inner_tol,
                                     max_iter=inner_max_iter, regressor=regressor)
        except PicardDivergence as exc:
            raise PicardDivergence(f"outer iteration {it}: {exc}", exc.partial, exc.report,
                                   exc.reports) from exc
        reports.append(reps)
        ranges = {k: (P[:, k].min(axis=0), P[:, k].max(axis=0)) for k in range(grid.N + 1)}
        new = DecouplingField(sol.tables, grid.N, problem.d, problem.n, s.h, ranges)
        if blowup is not None and np.max(np.abs(sol.Y)) > blowup:
            raise FloatingPointError(
                f"decoupling field exceeded 10 x the Q bound {blowup / 10:.4g} (outer iteration {it})")
        qnew, _ = _field_on(new, ensemble.W, problem.d)
        qold, _ = _field_on(current, ensemble.W, problem.d)
        delta = float(np.max(np.abs(qnew - qold)))
        deltas.append(delta)
        new.history = list(deltas)
        fld = new
        prev_P = P
        result = FbsdeResult(P, sol, new, it, list(deltas), False, reports)
        if delta <= tol:
            result.converged = True
            return result
    return result


def fbsde_to_bsde(fieldobj: DecouplingField, ensemble: PathEnsemble, warn_fraction: float = 0.01):
    """``(Y_k, Z_k) = (q_k(W_k), r_k(W_k))`` along the original Brownian paths.

    Warns when more than ``warn_fraction`` of the points fall outside the range
    of the forward states the field was fitted on.  Returns the field and the
    outside fraction.
    """
    W = ensemble.W
    Y, Z = _field_on(fieldobj, W, fieldobj.d)
    outside = 0
    total = 0
    for k, (lo, hi) in fieldobj.ranges.items():
        if k in (0, fieldobj.N):
            continue
        x = W[:, k]
        outside += int(np.sum(np.any((x < lo) | (x > hi), axis=1)))
        total += x.shape[0]
    frac = outside / total if total else 0.0
    if frac > warn_fraction:
        warnings.warn(f"{frac:.2%} of Brownian states lie outside the fitted range of the "
                      "forward states; the field is extrapolated there", RuntimeWarning)
    M = ensemble.M
    se = np.stack([Y[:, k].std(axis=0, ddof=1) / math.sqrt(M) for k in range(Y.shape[1])])
    return SolutionField(Y, Z, (0, ensemble.N), "decoupling-field", se, dict(fieldobj.tables)), frac


def gradient_check(fieldobj: DecouplingField, ensemble: PathEnsemble, step: float = 1e-4,
                   mass: float = 0.9) -> dict:
    """Compare ``r_k`` with the central-difference gradient of ``q_k``.

    Evaluated at knots ``1..N-1`` on the ensemble states inside the central
    ``mass`` region; returns the worst and the mean absolute gap.
    """
    worst, total, count = 0.0, 0.0, 0
    for k in range(1, fieldobj.N):
        x = ensemble.W[:, k]
        mask = central_mask(x, mass)
        xc = x[mask]
        r = fieldobj.r(k, xc)
        grad = np.empty_like(r)
        for i in range(fieldobj.n):
            e = np.zeros(fieldobj.n)
            e[i] = step
            grad[:, :, i] = (fieldobj.q(k, xc + e) - fieldobj.q(k, xc - e)) / (2 * step)
        gap = np.abs(grad - r)
        worst = max(worst, float(gap.max()))
        total += float(gap.sum())
        count += gap.size
    return {"max_gap": worst, "mean_gap": total / max(count, 1), "step": step, "mass": mass}


def central_mask(x: np.ndarray, mass: float = 0.9) -> np.ndarray:
    """Points inside the ellipsoid holding ``mass`` of the sample (Mahalanobis radius)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    c = x - x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    r2 = np.sum((c / sd) ** 2, axis=1)
    return r2 <= np.quantile(r2, mass)


# --------------------------------------------------------------------------
# Finite differences
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PdeGrid:
    """``[-L, L]^n`` with spacing ``dx``; ``substeps`` explicit steps per Monte Carlo step."""

    L: float
    dx: float
    n: int = 1
    substeps: Optional[int] = None
    safety: float = 1.25

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ValueError("the finite-difference check supports n = 1 or 2")
        if not (self.L > 0 and self.dx > 0):
            raise ValueError("L and dx must be positive")

    @property
    def nodes(self) -> np.ndarray:
        m = int(round(2 * self.L / self.dx))
        return np.linspace(-self.L, self.L, m + 1)

    def max_dt(self) -> float:
        return self.dx ** 2 / (2 * self.n * self.safety)

    def steps_for(self, dt: float) -> int:
        need = max(1, math.ceil(dt / self.max_dt()))
        if self.substeps is not None:
            if dt / self.substeps > self.max_dt() * (1 + 1e-12):
                raise ValueError(f"substeps={self.substeps} violate the stability bound "
                                 f"dt <= dx^2 / (2 n safety) = {self.max_dt():.3g}")
            return self.substeps
        return need


@dataclass(eq=False)
class PdeResult:
    x: np.ndarray               # (G, n) node coordinates
    t: np.ndarray               # Monte Carlo knot times
    u: np.ndarray               # (N+1, G, d)
    grad: np.ndarray            # (N+1, G, d, n)
    shape: tuple


def _laplacian_and_grad(U, dx, shape):
    """Central differences on a tensor grid with linear extrapolation at the edges."""
    d = U.shape[-1]
    V = U.reshape(shape + (d,))
    n = len(shape)
    lap = np.zeros_like(V)
    grad = np.zeros(V.shape + (n,))
    for ax in range(n):
        pad = np.concatenate([
            2 * np.take(V, [0], axis=ax) - np.take(V, [1], axis=ax),
            V,
            2 * np.take(V, [-1], axis=ax) - np.take(V, [-2], axis=ax),
        ], axis=ax)
        sl = [slice(None)] * V.ndim
        up = list(sl)
        dn = list(sl)
        mid = list(sl)
        up[ax] = slice(2, None)
        dn[ax] = slice(0, -2)
        mid[ax] = slice(1, -1)
        lap += (pad[tuple(up)] - 2 * pad[tuple(mid)] + pad[tuple(dn)]) / dx ** 2
        grad[..., ax] = (pad[tuple(up)] - pad[tuple(dn)]) / (2 * dx)
    G = U.shape[0]
    return lap.reshape(G, d), grad.reshape(G, d, n)


def pde_solve(problem: BsdeProblem, pde: PdeGrid, N: int) -> PdeResult:
    """Explicit backward scheme for ``u_t + (1/2) Lap u + F(t,x,u,grad u) + (grad u) G = 0``.

    Nonlinear terms are taken at the later time level.  Values are stored at
    the ``N + 1`` knots of the Monte Carlo grid.
    """
    s = _markovian(problem)
    if problem.n != pde.n:
        raise ValueError("PDE grid dimension does not match the problem")
    nodes = pde.nodes
    if pde.n == 1:
        X = nodes[:, None]
        shape = (len(nodes),)
    else:
        A, B = np.meshgrid(nodes, nodes, indexing="ij")
        X = np.stack([A.ravel(), B.ravel()], axis=1)
        shape = (len(nodes), len(nodes))
    d = problem.d
    T = problem.T
    dt_mc = T / N
    sub = pde.steps_for(dt_mc)
    tau = dt_mc / sub
    U = np.asarray(s.h(X), dtype=float).reshape(len(X), d)
    out_u = np.empty((N + 1, len(X), d))
    out_g = np.empty((N + 1, len(X), d, pde.n))
    lap, grad = _laplacian_and_grad(U, pde.dx, shape)
    out_u[N], out_g[N] = U, grad
    t_knots = np.linspace(0.0, T, N + 1)
    for k in range(N - 1, -1, -1):
        for i in range(sub):
            t = t_knots[k + 1] - i * tau
            lap, grad = _laplacian_and_grad(U, pde.dx, shape)
            Fv = np.asarray(s.F(t, X, U, grad), dtype=float).reshape(len(X), d)
            Gv = np.asarray(s.G(t, X, U, grad), dtype=float).reshape(len(X), pde.n)
            before = np.max(np.abs(U))
            U = U + tau * (0.5 * lap + Fv + np.einsum("gdn,gn->gd", grad, Gv))
            after = np.max(np.abs(U))
            if not np.all(np.isfinite(U)) or (before > 0 and after > 10 * before):
                raise FloatingPointError(
                    f"explicit scheme unstable at t={t:.4g}: check dt <= dx^2 / (2n) (CFL)")
        _, grad = _laplacian_and_grad(U, pde.dx, shape)
        out_u[k], out_g[k] = U, grad
    return PdeResult(X, t_knots, out_u, out_g, shape)


def _interp(res: PdeResult, k: int, x: np.ndarray) -> np.ndarray:
    """Linear (n=1) or bilinear (n=2) interpolation of ``u(t_k, .)`` at points ``x``."""
    from scipy.interpolate import RegularGridInterpolator

    nodes = [np.unique(res.x[:, i]) for i in range(res.x.shape[1])]
    vals = res.u[k].reshape(res.shape + (res.u.shape[2],))
    f = RegularGridInterpolator(nodes, vals, bounds_error=False, fill_value=None)
    return f(x)


def pde_crosscheck(problem: BsdeProblem, fieldobj: DecouplingField, ensemble: PathEnsemble,
                   pde: PdeGrid, mass: float = 0.9, factor: float = 5.0,
                   states: Optional[np.ndarray] = None) -> tuple[PdeResult, dict]:
    """Compare ``q_k`` with the finite-difference ``u(t_k, .)`` at interior knots.

    Truncation error of the scheme is estimated by rerunning on a grid with
    twice the spacing (and four times the time step) and taking the
    difference.  The check passes when, at every interior knot, the largest
    gap over the central ``mass`` region of the Monte Carlo states stays
    below ``factor x (truncation + regression SE)``.
    """
    N = ensemble.N
    fine = pde_solve(problem, pde, N)
    coarse_grid = PdeGrid(pde.L, 2 * pde.dx, pde.n, None, pde.safety)
    coarse = pde_solve(problem, coarse_grid, N)
    states = ensemble.W if states is None else states
    rows = []
    ok = True
    for k in range(1, N):
        x = states[:, k]
        inside = central_mask(x, mass)
        inside &= np.all(np.abs(x) <= pde.L - 2 * pde.dx, axis=1)
        xc = x[inside]
        if len(xc) == 0:
            continue
        u_f = _interp(fine, k, xc).reshape(len(xc), -1)
        u_c = _interp(coarse, k, xc).reshape(len(xc), -1)
        q = fieldobj.q(k, xc)
        trunc = float(np.max(np.abs(u_f - u_c)))
        se = float(np.max(fieldobj.q_se(k, xc)))
        gap = float(np.max(np.abs(q - u_f)))
        allowed = factor * (trunc + se)
        rows.append({"knot": k, "t": float(ensemble.grid.t[k]), "gap": gap,
                     "truncation": trunc, "regression_se": se, "allowed": allowed})
        ok &= gap <= allowed
    return fine, {"passes": bool(ok), "factor": factor, "mass": mass, "knots": rows,
                  "max_gap": max((r["gap"] for r in rows), default=0.0)}


# --------------------------------------------------------------------------
# Sampled Lipschitz constants
# --------------------------------------------------------------------------

def lipschitz_certificate(problem: BsdeProblem, samples: int = 10_000, seed: int = 0,
                          scale: float = 2.0) -> dict:
    """Max difference quotients of ``F``, ``G`` and ``h`` over random pairs.

    Half the pairs are nearby points (relative offset ``1e-3``) to catch the
    local slope, half are independent draws.  The quotient divides by
    ``|x - x'| + |y - y'| + |z - z'|``.  Also reports
    ``max |F(t,x,0,0)| + |G(t,x,0,0)| + |h(x)|``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    s = _markovian(problem)
    rng = np.random.default_rng(seed)
    d, n = problem.d, problem.n
    t = rng.uniform(0, problem.T, samples)

    def draw():
        return (rng.normal(0, scale, (samples, n)), rng.normal(0, scale, (samples, d)),
                rng.normal(0, scale, (samples, d, n)))

    x1, y1, z1 = draw()
    x2, y2, z2 = draw()
    near = rng.random(samples) < 0.5
    x2[near] = x1[near] + 1e-3 * rng.normal(size=(near.sum(), n))
    y2[near] = y1[near] + 1e-3 * rng.normal(size=(near.sum(), d))
    z2[near] = z1[near] + 1e-3 * rng.normal(size=(near.sum(), d, n))

    def norm(a):
        return np.sqrt(np.sum(a.reshape(len(a), -1) ** 2, axis=1))

    dist = norm(x1 - x2) + norm(y1 - y2) + norm(z1 - z2)
    dx = norm(x1 - x2)

    def per_time(fn, *args):
        # evaluators take a scalar time; group by distinct draws
        out = [np.asarray(fn(float(t[i]), *(a[i:i + 1] for a in args)), dtype=float).reshape(-1)
               for i in range(samples)]
        return np.stack(out)

    def quotient(fn):
        v1 = per_time(fn, x1, y1, z1)
        v2 = per_time(fn, x2, y2, z2)
        return float(np.max(norm(v1 - v2) / np.where(dist > 0, dist, np.inf)))

    h1 = np.asarray(s.h(x1), dtype=float).reshape(samples, -1)
    h2 = np.asarray(s.h(x2), dtype=float).reshape(samples, -1)
    lip_h = float(np.max(norm(h1 - h2) / np.where(dx > 0, dx, np.inf)))
    lip_F = quotient(s.F)
    lip_G = quotient(s.G)
    zeros_y = np.zeros((samples, d))
    zeros_z = np.zeros((samples, d, n))
    at_zero = (norm(per_time(s.F, x1, zeros_y, zeros_z)) + norm(per_time(s.G, x1, zeros_y, zeros_z))
               + norm(h1))
    declared = s.lipschitz_constant
    observed = max(lip_F, lip_G, lip_h)
    return {
        "F": lip_F, "G": lip_G, "h": lip_h,
        "max_constant": observed,
        "at_zero": float(np.max(at_zero)),
        "declared": declared,
        "passes": None if declared is None else bool(observed <= declared * (1 + 1e-9)),
        "samples": samples,
    }


# --------------------------------------------------------------------------
# Pipeline and export
# --------------------------------------------------------------------------

def run_markovian(problem: BsdeProblem, ensemble: PathEnsemble,
                  estimator: Optional[RegressionEstimator] = None, tol: float = 1e-4,
                  max_outer: int = 30, inner_tol: float = 1e-6) -> dict:
    """Decoupling iteration, translation to the BSDE, bound and measure checks."""
    s = _markovian(problem)
    res = solve_fbsde_decoupling(problem, ensemble, tol, max_outer, estimator, inner_tol)
    bsde, frac = fbsde_to_bsde(res.field, ensemble)
    # q_0 is evaluated at a single state; its error is the backward solve's
    bsde.y_se = res.solution.y_se
    res.bsde = bsde
    report = {"decoupling": res.to_dict(), "extrapolated_fraction": frac}
    if s.growth_constant is not None:
        report["q_bound"] = check_q_bound(res.solution.Y, s.growth_constant, problem.T).to_dict()
    # density of the measure under which the forward process is Brownian
    t = ensemble.grid.t
    H = np.stack([-np.asarray(s.G(t[k], res.forward[:, k], res.solution.Y[:, k],
                                  res.solution.Z[:, k]), dtype=float).reshape(ensemble.M, problem.n)
                  for k in range(ensemble.N)], axis=1)
    weight = stochastic_exponential(ensemble, H)
    report["forward_measure"] = drift_check("forward_measure", weight).to_dict()
    report["gradient"] = gradient_check(res.field, ensemble)
    return {"result": res, "bsde": bsde, "report": report, "weight": weight}


def export_field(path, fieldobj: DecouplingField) -> None:
    """CSV rows ``knot, basis_index, coefficient, coordinate`` for ``q`` (``r`` flattened after)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["knot", "basis_index", "coefficient", "coordinate", "block"])
        for k in sorted(fieldobj.tables):
            tab = fieldobj.tables[k]
            for j in range(tab.coef_y.shape[1]):
                for i in range(tab.coef_y.shape[0]):
                    w.writerow([k, i, repr(float(tab.coef_y[i, j])), j, "q"])
            cz = tab.coef_z.reshape(tab.coef_z.shape[0], -1)
            for j in range(cz.shape[1]):
                for i in range(cz.shape[0]):
                    w.writerow([k, i, repr(float(cz[i, j])), j, "r"])


def export_pde(path, res: PdeResult) -> None:
    """CSV rows ``t, x..., u...``."""
    n = res.x.shape[1]
    d = res.u.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i}" for i in range(n)] + [f"u{j}" for j in range(d)])
        for k, t in enumerate(res.t):
            for g in range(res.x.shape[0]):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in res.x[g]]
                           + [repr(float(v)) for v in res.u[k, g]])
