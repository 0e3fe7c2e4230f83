"""Picard iteration on short windows, horizon selection and backward pasting.

The map ``phi`` sends a candidate ``(y, z)`` on a window ``[a, b]`` to

    Y_k = E_k[ xi_b + sum_{j >= k} f(t_j, y_j, z_j) dt ],
    Z_k = E_k[ (xi_b + sum_{j > k} f_j dt) dW_k' ] / dt,

with a left-endpoint Riemann sum.  The regression backend evaluates it in
one backward sweep.  The payload regressed at knot ``k`` is the full sum
(nothing is chained from knot ``k+1``, so regression errors do not pile up)
minus the martingale increments already fitted at later knots.  Those
increments have conditional mean zero and are uncorrelated with ``dW_k``, so
subtracting them leaves both targets unchanged while removing most of the
payload's variance.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .condexp import (CondExpEstimate, FittedBasis, KnotRegressor, NestedEstimator,
                      RegressionEstimator, condexp_nested)
from .diagnostics import estimate_bmo
from .problem import BsdeProblem, Subquadratic, apriori_y_bound
from .simulate import NonFiniteError, PathEnsemble

__all__ = [
    "BallParams",
    "SolutionField",
    "PicardReport",
    "PicardDivergence",
    "choose_h",
    "ball_for",
    "phi_step",
    "zero_driver_sweep",
    "solve_short_horizon",
    "solve_global",
    "phi_nested",
]

log = logging.getLogger(__name__)

DIVERGENCE_LEVEL = 1e8
# Deltas below this are rounding noise of the sweep itself, not Picard error.
FLOAT_FLOOR = 1e-12
MAX_WINDOWS = 1_000_000


class PicardDivergence(RuntimeError):
    """A window failed to converge; carries the partial solution and its report."""

    def __init__(self, message, partial=None, report=None, reports=None):
        super().__init__(message)
        self.partial = partial
        self.report = report
        self.reports = reports or []


# --------------------------------------------------------------------------
# Horizon rule
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BallParams:
    """Radius ``R`` of the ball (sup and BMO norms), window length ``h`` and constants."""

    R: float
    h: float
    C: float
    eps: float
    rhoR: float

    def __post_init__(self):
        if self.R < 3 * self.C - 1e-12:
            raise ValueError(f"ball radius R={self.R} must be >= 3C={3 * self.C}")
        if not self.h > 0:
            raise ValueError("h must be positive")

    def to_dict(self):
        return {"R": self.R, "h": self.h, "C": self.C, "eps": self.eps, "rhoR": self.rhoR}


def _h_margins(h, C, R, eps, rhoR):
    first = C * h * (1 + R) + C * rhoR * h ** (eps / 2) * R ** (2 - eps) - C
    second = rhoR * h - 0.125
    third = rhoR * math.sqrt(2 * (h + h ** eps * (2 * R) ** (2 - 2 * eps))) - 0.125
    return first, second, third


def choose_h(C: float, R: float, eps: float, rhoR: float, T: float = math.inf,
             rel_tol: float = 1e-6) -> float:
    """Largest ``h <= T`` meeting the growth and contraction conditions of one window.

    Growth:       C h (1+R) + C rhoR h^(eps/2) R^(2-eps) <= C
    Contraction:  rhoR h <= 1/8  and  rhoR sqrt(2 (h + h^eps (2R)^(2-2eps))) <= 1/8

    All three left-hand sides increase with ``h``, so the admissible set is an
    interval ``(0, h*]``, located by bisection to relative width ``rel_tol``.
    With ``C = 0`` the growth condition reads ``0 <= 0`` and only the
    contraction conditions bind.
    """
    if not C > 0 and C != 0:
        raise ValueError("C must be >= 0")
    if R < 3 * C - 1e-12:
        raise ValueError(f"R={R} must be >= 3C={3 * C}")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if rhoR < 0:
        raise ValueError("rhoR must be >= 0")

    def ok(h):
        return all(m <= 0 for m in _h_margins(h, C, R, eps, rhoR))

    if C == 0 and rhoR == 0:
        if math.isinf(T):
            raise ValueError("every h is admissible; pass the horizon T to cap it")
        return float(T)
    hi = float(T) if math.isfinite(T) else 1.0
    if math.isinf(T):
        while ok(hi):
            hi *= 2.0
            if hi > 1e12:
                raise ValueError("horizon rule unbounded; pass T")
    elif ok(hi):
        return hi
    floor = 1e-12 * (T if math.isfinite(T) else 1.0)
    lo = hi / 2.0
    while not ok(lo):
        hi = lo
        lo /= 2.0
        if lo < floor:
            if not ok(floor):
                raise ValueError("horizon rule degenerate: no admissible h above 1e-12 T")
            lo = floor
    while (hi - lo) > rel_tol * lo:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def ball_for(problem: BsdeProblem, C: Optional[float] = None) -> BallParams:
    """Ball and window length with ``C`` replaced by the global a priori bound.

    ``C`` defaults to the subquadratic constant of ``problem``; the ball radius
    is ``3 phi(0)`` with ``phi(0) = (C+1) exp((C+1)^2 T / 2)``.
    """
    s = problem.structure
    if not isinstance(s, Subquadratic):
        raise ValueError(
            f"problem {problem.name!r} declares no subquadratic certificate (C, eps, rho); "
            "the horizon rule needs one")
    C0 = s.C if C is None else C
    Cg = apriori_y_bound(C0, problem.T, 0.0)
    R = 3.0 * Cg
    rhoR = float(s.rho(R))
    h = choose_h(Cg, R, s.eps, rhoR, problem.T)
    return BallParams(R, h, Cg, s.eps, rhoR)


# --------------------------------------------------------------------------
# Solution containers
# --------------------------------------------------------------------------

@dataclass
class KnotTable:
    """Fitted value and slope functions of the state at one knot."""

    basis: FittedBasis
    coef_y: np.ndarray        # (p, d)
    slope_basis: FittedBasis
    coef_z: np.ndarray        # (p_z, d, n)
    fit: Optional[object] = None

    def y(self, x):
        return self.basis(x) @ self.coef_y

    def z(self, x):
        return np.einsum("mp,pdn->mdn", self.slope_basis(x), self.coef_z)


@dataclass(eq=False)
class SolutionField:
    """Discrete ``(Y, Z)`` on the knots ``a..b`` of a window.

    ``Y`` is ``(M, b-a+1, d)`` and ``Z`` is ``(M, b-a, d, n)``; ``y_se`` holds the
    plain Monte Carlo standard error of the knot mean of ``Y`` (computed from
    the uncontrolled payload).  ``tables`` maps absolute knots to fitted
    functions of the state, used to evaluate the field on fresh paths.
    """

    Y: np.ndarray
    Z: np.ndarray
    window: tuple[int, int]
    method: str = "regression"
    y_se: Optional[np.ndarray] = None
    tables: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def M(self):
        return self.Y.shape[0]

    @property
    def d(self):
        return self.Y.shape[2]

    @property
    def n(self):
        return self.Z.shape[3]

    def y0(self):
        """Mean of ``Y`` at the window's first knot and its standard error."""
        mean = self.Y[:, 0, :].mean(axis=0)
        se = self.y_se[0] if self.y_se is not None else self.Y[:, 0, :].std(axis=0, ddof=1) / math.sqrt(self.M)
        return mean, se

    def knot(self, k: int):
        """``(Y_k, Z_k)`` at absolute knot ``k`` (``Z`` is None at the last knot)."""
        a, b = self.window
        if not a <= k <= b:
            raise IndexError(f"knot {k} outside window {self.window}")
        return self.Y[:, k - a], (self.Z[:, k - a] if k < b else None)

    @staticmethod
    def paste(fields: list["SolutionField"]) -> "SolutionField":
        """Concatenate adjacent windows given in backward order (latest first)."""
        ordered = sorted(fields, key=lambda f: f.window[0])
        for left, right in zip(ordered, ordered[1:]):
            if left.window[1] != right.window[0]:
                raise ValueError("windows are not adjacent")
        Y = np.concatenate([f.Y[:, :-1] for f in ordered[:-1]] + [ordered[-1].Y], axis=1)
        Z = np.concatenate([f.Z for f in ordered], axis=1)
        se = None
        if all(f.y_se is not None for f in ordered):
            se = np.concatenate([f.y_se[:-1] for f in ordered[:-1]] + [ordered[-1].y_se], axis=0)
        tables = {}
        history = []
        for f in ordered:
            tables.update(f.tables)
            history.extend(f.history)
        return SolutionField(Y, Z, (ordered[0].window[0], ordered[-1].window[1]),
                             ordered[0].method, se, tables, history)


@dataclass
class PicardReport:
    window: tuple[int, int]
    iterations: int = 0
    sup_deltas: list = field(default_factory=list)
    bmo_deltas: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    status: str = "running"
    h: Optional[float] = None
    note: str = ""

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def deltas(self) -> list:
        return [max(s, b) for s, b in zip(self.sup_deltas, self.bmo_deltas)]

    @property
    def max_ratio(self) -> Optional[float]:
        return max(self.ratios) if self.ratios else None

    def to_dict(self):
        return {
            "window": list(self.window),
            "iterations": self.iterations,
            "sup_deltas": [float(x) for x in self.sup_deltas],
            "bmo_deltas": [float(x) for x in self.bmo_deltas],
            "ratios": [float(x) for x in self.ratios],
            "status": self.status,
            "converged": self.converged,
            "h": self.h,
            "note": self.note,
        }


# --------------------------------------------------------------------------
# The map phi
# --------------------------------------------------------------------------

def _driver_values(problem, ensemble, window, Y, Z):
    """``f(t_j, W_{0..j}, y_j, z_j)`` for ``j`` in ``[a, b)``: shape ``(M, b-a, d)``."""
    a, b = window
    t = ensemble.grid.t
    M = ensemble.M
    out = np.empty((M, b - a, problem.d))
    for j in range(a, b):
        f = np.asarray(problem.driver(t[j], ensemble.W[:, : j + 1, :], Y[:, j - a], Z[:, j - a]),
                       dtype=float).reshape(M, problem.d)
        bad = ~np.isfinite(f)
        if bad.any():
            raise NonFiniteError("driver", int(np.argwhere(bad)[0, 0]), j)
        out[:, j - a] = f
    return out


def _sweep(regressor: KnotRegressor, window, terminal, F, tables: bool = True) -> SolutionField:
    """Backward regression sweep for given driver values ``F`` (``(M, b-a, d)``)."""
    a, b = window
    ens = regressor.ensemble
    dt = ens.grid.dt
    terminal = np.asarray(terminal, dtype=float)
    M, d = terminal.shape
    n = ens.n
    Y = np.empty((M, b - a + 1, d))
    Z = np.empty((M, b - a, d, n))
    se = np.empty((b - a + 1, d))
    Y[:, -1] = terminal
    se[-1] = terminal.std(axis=0, ddof=1) / math.sqrt(M) if M > 1 else np.inf
    raw = terminal.copy()          # xi + sum_{j > k} f_j dt
    control = np.zeros_like(raw)   # fitted martingale increments after knot k
    out_tables = {}
    for k in range(b - 1, a - 1, -1):
        fit = regressor.joint(k, raw - control)
        f_dt = F[:, k - a] * dt
        Y[:, k - a] = fit.values + f_dt
        Z[:, k - a] = fit.Z
        raw += f_dt
        se[k - a] = raw.std(axis=0, ddof=1) / math.sqrt(M)
        control += fit.martingale_increment(ens.dW[:, k, :])
        if tables:
            out_tables[k] = (fit, f_dt)
    field_ = SolutionField(Y, Z, (a, b), "regression", se)
    if tables:
        for k, (fit, f_dt) in out_tables.items():
            coef_y = fit.coef_y + regressor.project(k, f_dt).coef.reshape(fit.coef_y.shape)
            field_.tables[k] = KnotTable(fit.basis, coef_y, fit.slope_basis, fit.coef_z, fit)
    return field_


def zero_driver_sweep(regressor: KnotRegressor, window, terminal) -> SolutionField:
    """Conditional expectation of the terminal payload and its Z: the initial iterate."""
    a, b = window
    F = np.zeros((regressor.ensemble.M, b - a, np.asarray(terminal).shape[1]))
    return _sweep(regressor, window, terminal, F)


def phi_step(problem: BsdeProblem, regressor: KnotRegressor, candidate: SolutionField,
             terminal) -> SolutionField:
    """One application of ``phi`` to ``candidate`` on its window."""
    F = _driver_values(problem, regressor.ensemble, candidate.window, candidate.Y, candidate.Z)
    return _sweep(regressor, candidate.window, terminal, F)


class _Phi:
    """``phi`` with a one-entry memo: identical driver values give the identical sweep."""

    def __init__(self, problem, regressor, window, terminal):
        self.problem = problem
        self.regressor = regressor
        self.window = window
        self.terminal = terminal
        self._last = None

    def seed(self, F, out):
        self._last = (F, out)

    def __call__(self, candidate):
        F = _driver_values(self.problem, self.regressor.ensemble, self.window, candidate.Y, candidate.Z)
        if self._last is not None and np.array_equal(F, self._last[0]):
            return self._last[1]
        out = _sweep(self.regressor, self.window, self.terminal, F)
        self._last = (F, out)
        return out


def _distance(regressor, u: SolutionField, v: SolutionField):
    dY = float(np.max(np.abs(u.Y - v.Y))) if u.Y.size else 0.0
    dZ = u.Z - v.Z
    if not np.all(np.isfinite(dY)) or not np.all(np.isfinite(dZ)):
        return math.inf, math.inf
    bmo = estimate_bmo(dZ, regressor.ensemble.grid.dt, regressor, start=u.window[0])
    return dY, bmo


# --------------------------------------------------------------------------
# Solvers
# --------------------------------------------------------------------------

def solve_short_horizon(problem: BsdeProblem, regressor: KnotRegressor, window, terminal,
                        ball: Optional[BallParams] = None, tol: float = 1e-6, max_iter: int = 50):
    """Iterate ``phi`` on one window from the zero-driver solution.

    Returns ``(field, report)``.  The loop stops when the larger of the sup
    delta of ``Y`` and the BMO delta of ``Z`` drops below ``tol`` (or below
    the floating-point floor).  If it does not, the report is flagged
    ``diverged`` (with ``note="max_iter"`` when the budget ran out) and the
    last iterate is returned.
    """
    a, b = window
    grid = regressor.ensemble.grid
    length = (b - a) * grid.dt
    report = PicardReport((a, b), h=None if ball is None else ball.h)
    if ball is not None and length > ball.h * (1 + 1e-9):
        warnings.warn(f"window length {length:.4g} exceeds the admissible h={ball.h:.4g}",
                      RuntimeWarning)
    terminal = np.asarray(terminal, dtype=float)
    phi = _Phi(problem, regressor, (a, b), terminal)
    current = zero_driver_sweep(regressor, (a, b), terminal)
    phi.seed(np.zeros((terminal.shape[0], b - a, terminal.shape[1])), current)
    for it in range(1, max_iter + 1):
        try:
            nxt = phi(current)
        except NonFiniteError as exc:
            report.status = "diverged"
            report.note = str(exc)
            current.history = [report]
            return current, report
        dY, dZ = _distance(regressor, nxt, current)
        report.iterations = it
        report.sup_deltas.append(dY)
        report.bmo_deltas.append(dZ)
        D = max(dY, dZ)
        if it >= 2:
            prev = report.deltas[-2]
            report.ratios.append(D / prev if prev > 0 else (0.0 if D == 0 else math.inf))
        log.debug("window %s iteration %d: dY=%.3e dZ=%.3e", window, it, dY, dZ)
        if not math.isfinite(D) or D > DIVERGENCE_LEVEL:
            report.status = "diverged"
            report.note = "delta blew up"
            current.history = [report]
            return current, report
        current = nxt
        if D <= tol or D <= FLOAT_FLOOR:
            report.status = "converged"
            current.history = [report]
            return current, report
    report.status = "diverged"
    report.note = "max_iter"
    current.history = [report]
    return current, report


def _divisor_windows(N: int, steps: int):
    """Window boundaries with ``steps`` knots each (the first one may be shorter)."""
    bounds = list(range(N, 0, -steps))
    if bounds[-1] != 0:
        bounds.append(0)
    return list(zip(bounds[1:], bounds[:-1]))


def solve_global(problem: BsdeProblem, ensemble: PathEnsemble, policy: str = "global",
                 tol: float = 1e-6, max_iter: int = 50,
                 estimator: Optional[RegressionEstimator] = None,
                 regressor: Optional[KnotRegressor] = None,
                 steps_per_window: Optional[int] = None, ratio_cap: float = 0.6):
    """Solve on ``[0, T]`` by pasting windows backwards from ``T``.

    ``policy``:

    * ``"global"`` - one window length from :func:`choose_h` with ``C``
      replaced by the global bound ``phi(0)`` (needs a subquadratic certificate);
    * ``"running"`` - per window, ``C`` is replaced by the bound at the
      window's right end, which allows longer windows near ``T``;
    * ``"fixed"`` - ``steps_per_window`` knots per window, no certificate needed;
    * ``"adaptive"`` - start from the whole horizon and halve a window until
      its measured contraction ratio stays below ``ratio_cap``.

    Returns ``(field, reports)``; raises :class:`PicardDivergence` when a window
    fails, carrying the windows solved so far.
    """
    if regressor is None:
        regressor = (estimator or RegressionEstimator()).bind(ensemble)
    grid = ensemble.grid
    N, dt = grid.N, grid.dt
    terminal = problem.terminal(ensemble.W)
    terminal = np.asarray(terminal, dtype=float).reshape(ensemble.M, problem.d)
    terminal_full = terminal

    if policy in ("global", "running"):
        ball = ball_for(problem)
        s = problem.structure
        if policy == "global":
            steps = _steps_for(ball.h, dt, N)
            plan = lambda b: (steps, ball)  # noqa: E731
        else:
            def plan(b):
                Cb = apriori_y_bound(s.C, problem.T, grid.t[b])
                R = 3.0 * Cb
                rb = BallParams(R, choose_h(Cb, R, s.eps, float(s.rho(R)), problem.T), Cb, s.eps,
                                float(s.rho(R)))
                return _steps_for(rb.h, dt, N), rb
    elif policy == "fixed":
        if not steps_per_window or steps_per_window < 1:
            raise ValueError("policy 'fixed' needs steps_per_window >= 1")
        plan = lambda b: (steps_per_window, None)  # noqa: E731
    elif policy == "adaptive":
        plan = None
    else:
        raise ValueError(f"unknown ball policy {policy!r}")

    pieces, reports = [], []
    b = N
    current_steps = N
    while b > 0:
        if plan is not None:
            steps, ball = plan(b)
            a = max(b - steps, 0)
            fld, rep = solve_short_horizon(problem, regressor, (a, b), terminal, ball, tol, max_iter)
        else:
            while True:
                a = max(b - current_steps, 0)
                fld, rep = solve_short_horizon(problem, regressor, (a, b), terminal, None, tol, max_iter)
                too_fast = rep.max_ratio is not None and rep.max_ratio > ratio_cap
                if (rep.converged and not too_fast) or current_steps == 1:
                    break
                current_steps = max(current_steps // 2, 1)
                log.info("window %s: ratio %s, shrinking to %d steps", (a, b), rep.max_ratio,
                         current_steps)
            rep.note = (rep.note + f" adaptive steps={b - a}").strip()
        reports.append(rep)
        pieces.append(fld)
        if not rep.converged:
            partial = SolutionField.paste(pieces)
            raise PicardDivergence(f"window {rep.window} did not converge ({rep.note})",
                                   partial, rep, reports)
        terminal = fld.Y[:, 0, :]
        b = a
    out = SolutionField.paste(pieces)
    out.history = reports
    out.y_se = _plain_se(problem, ensemble, out, terminal_full)
    return out, reports


def _plain_se(problem, ensemble, fld, terminal):
    """Knot-mean standard errors of the full-horizon payload ``xi + sum_{j>=k} f_j dt``.

    This is the Monte Carlo error of a plain average; it also covers the
    regression error carried across pasted windows, which the per-window
    payloads do not see.
    """
    F = _driver_values(problem, ensemble, fld.window, fld.Y, fld.Z)
    a, b = fld.window
    M = ensemble.M
    acc = terminal.copy()
    se = np.empty((b - a + 1, terminal.shape[1]))
    se[-1] = terminal.std(axis=0, ddof=1) / math.sqrt(M)
    for k in range(b - 1, a - 1, -1):
        acc += F[:, k - a] * ensemble.grid.dt
        se[k - a] = acc.std(axis=0, ddof=1) / math.sqrt(M)
    return se


def _steps_for(h: float, dt: float, N: int) -> int:
    steps = int(math.floor(h / dt * (1 + 1e-9)))
    if steps < 1:
        warnings.warn(f"admissible window h={h:.3g} is shorter than one step dt={dt:.3g}; "
                      "using one-step windows", RuntimeWarning)
        steps = 1
    steps = min(steps, N)
    if math.ceil(N / steps) > MAX_WINDOWS:
        raise ValueError(f"{math.ceil(N / steps)} windows exceed the cap of {MAX_WINDOWS}")
    return steps


# --------------------------------------------------------------------------
# Nested evaluation of phi (backend cross-check)
# --------------------------------------------------------------------------

def phi_nested(problem: BsdeProblem, solution: SolutionField, ensemble: PathEnsemble, k: int,
               paths, estimator: NestedEstimator = NestedEstimator()) -> CondExpEstimate:
    """``phi(solution)`` at knot ``k`` on ``paths``, by resimulated suffixes.

    Along each suffix the candidate is read from the field's fitted state
    functions at knots after ``k``; at knot ``k`` itself the regression values
    on the conditioning path are used.  The window must end at ``T``.
    """
    a, b = solution.window
    if b != ensemble.N:
        raise ValueError("nested phi needs a field whose window ends at the terminal knot")
    if not a <= k < b:
        raise ValueError(f"knot {k} outside window {solution.window}")
    t = ensemble.grid.t
    dt = ensemble.grid.dt
    paths = np.atleast_1d(np.asarray(paths, dtype=int))
    yk, zk = solution.knot(k)
    first = problem.driver(t[k], ensemble.W[paths, : k + 1, :], yk[paths], zk[paths]) * dt

    def payload(flat):
        K = flat.shape[0]
        total = np.asarray(problem.terminal(flat), dtype=float).reshape(K, problem.d)
        for j in range(k + 1, b):
            tab = solution.tables[j]
            x = flat[:, j, :]
            total += problem.driver(t[j], flat[:, : j + 1, :], tab.y(x), tab.z(x)) * dt
        return total

    est = condexp_nested(payload, k, ensemble, estimator, paths)
    est.values = est.values + first
    return est
