"""BSDE problem definitions, structural certificates and closed-form bounds.

A problem is ``Y_t = xi + int_t^T f(s, Y_s, Z_s) ds - int_t^T Z_s dW_s`` with
``Y`` in R^d and ``W`` an n-dimensional Brownian motion.  Evaluators are
vectorised over paths:

* ``terminal(paths) -> (M, d)`` with ``paths`` of shape ``(M, N+1, n)``;
* ``driver(t, prefix, y, z) -> (M, d)`` with ``prefix`` of shape
  ``(M, k+1, n)`` (the Brownian path up to the current knot), ``y`` of shape
  ``(M, d)`` and ``z`` of shape ``(M, d, n)``.

Structure (Markovian / projectable / subquadratic / generic) is declared, not
discovered, and checked by sampling in :func:`validate_problem`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

Terminal = Callable[[np.ndarray], np.ndarray]
Driver = Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]

__all__ = [
    "RhoSpec",
    "Markovian",
    "Projectable",
    "Subquadratic",
    "Generic",
    "BsdeProblem",
    "ConditionResult",
    "ValidationReport",
    "markovian_problem",
    "projectable_problem",
    "subquadratic_problem",
    "validate_problem",
    "truncate_pi_L",
    "projected_scalar_driver",
    "apriori_y_bound",
    "fbsde_q_bound",
]


@dataclass(frozen=True)
class RhoSpec:
    """Nondecreasing ``rho(r) = c0 + c1 r + c2 r^2 + ...`` with all ``ci >= 0``."""

    coefficients: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.coefficients)
        if not coeffs:
            raise ValueError("RhoSpec needs at least a constant term")
        if any(c < 0 or not math.isfinite(c) for c in coeffs):
            raise ValueError(f"RhoSpec coefficients must be finite and >= 0, got {coeffs}")
        object.__setattr__(self, "coefficients", coeffs)

    @classmethod
    def constant(cls, value: float) -> "RhoSpec":
        return cls((value,))

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        for c in reversed(self.coefficients):
            out = out * r + c
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class Markovian:
    """``f(t, W, y, z) = F(t, W_t, y, z) + z G(t, W_t, y, z)``, ``xi = h(W_T)``.

    ``F(t, x, y, z) -> (M, d)``, ``G(t, x, y, z) -> (M, n)``, ``h(x) -> (M, d)``
    with ``x`` of shape ``(M, n)``.  ``growth_constant`` and ``rho`` are the
    constants of the growth conditions (A1)-(A3); ``lipschitz_constant`` is the
    constant of the Lipschitz hypotheses used for uniqueness.
    """

    F: Callable
    G: Callable
    h: Callable
    lipschitz_constant: Optional[float] = None
    growth_constant: Optional[float] = None
    rho: Optional[RhoSpec] = None

    kind = "markovian"


@dataclass(frozen=True)
class Projectable:
    """``f(t, y, z) = P(t, a'y, a'z) + y Q(...) + z R(...)``.

    ``P(t, prefix, u, v) -> (M, d)``, ``Q -> (M,)``, ``R -> (M, n)`` with
    ``u`` of shape ``(M,)`` and ``v`` of shape ``(M, n)``.
    """

    a: np.ndarray
    P: Callable
    Q: Callable
    R: Callable
    C: float = 1.0
    rho: RhoSpec = field(default_factory=RhoSpec)

    kind = "projectable"

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(-1)
        if not np.any(a != 0):
            raise ValueError("projection vector a must be nonzero")
        object.__setattr__(self, "a", a)


@dataclass(frozen=True)
class Subquadratic:
    """Constants of (B1)-(B4) and the split ``f = F + G`` (same signature as f)."""

    C: float
    eps: float
    rho: RhoSpec
    F: Callable
    G: Callable

    kind = "subquadratic"

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise ValueError(f"eps must lie strictly inside (0, 1), got {self.eps}")
        if self.C < 0:
            raise ValueError(f"C must be >= 0, got {self.C}")


@dataclass(frozen=True)
class Generic:
    kind = "generic"


Structure = Union[Markovian, Projectable, Subquadratic, Generic]


@dataclass(frozen=True)
class BsdeProblem:
    d: int
    n: int
    T: float
    terminal: Terminal
    driver: Driver
    structure: Structure = field(default_factory=Generic)
    terminal_bound: Optional[float] = None
    name: str = "custom"

    def __post_init__(self):
        if self.d < 1 or self.n < 1:
            raise ValueError("dimensions d and n must be >= 1")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")


def markovian_problem(F, G, h, d, n, T, *, lipschitz_constant=None,
                      growth_constant=None, rho=None, name="markovian") -> BsdeProblem:
    structure = Markovian(F, G, h, lipschitz_constant, growth_constant, rho)

    def terminal(paths):
        return np.asarray(h(paths[:, -1, :]), dtype=float).reshape(len(paths), d)

    def driver(t, prefix, y, z):
        x = prefix[:, -1, :]
        g = G(t, x, y, z)
        return F(t, x, y, z) + np.einsum("mdn,mn->md", z, g)

    return BsdeProblem(d, n, T, terminal, driver, structure,
                       terminal_bound=growth_constant, name=name)


def projectable_problem(a, P, Q, R, terminal, d, n, T, *, C=1.0, rho=None,
                        terminal_bound=None, name="projectable") -> BsdeProblem:
    structure = Projectable(np.asarray(a, dtype=float), P, Q, R, C,
                            rho if rho is not None else RhoSpec())
    a = structure.a

    def driver(t, prefix, y, z):
        u = y @ a
        v = np.einsum("d,mdn->mn", a, z)
        p = P(t, prefix, u, v)
        q = Q(t, prefix, u, v)
        r = R(t, prefix, u, v)
        return p + y * q[:, None] + np.einsum("mdn,mn->md", z, r)

    return BsdeProblem(d, n, T, terminal, driver, structure,
                       terminal_bound=terminal_bound if terminal_bound is not None else C,
                       name=name)


def subquadratic_problem(F, G, terminal, d, n, T, *, C, eps, rho,
                         name="subquadratic") -> BsdeProblem:
    structure = Subquadratic(C, eps, rho, F, G)

    def driver(t, prefix, y, z):
        return F(t, prefix, y, z) + G(t, prefix, y, z)

    return BsdeProblem(d, n, T, terminal, driver, structure, terminal_bound=C, name=name)


# --------------------------------------------------------------------------
# Small closed-form pieces
# --------------------------------------------------------------------------

def truncate_pi_L(y, z, L: float):
    """Radial truncation ``(min(1, L/|y|) y, min(1, L/|z|) z)`` (Frobenius norm on z).

    Works on single points and on batches whose leading axis indexes paths.
    """
    if not L > 0:
        raise ValueError("L must be positive")
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)

    def scale(a, batch_axes):
        if batch_axes:
            norm = np.sqrt(np.sum(a * a, axis=tuple(range(batch_axes, a.ndim)), keepdims=True))
        else:
            norm = np.sqrt(np.sum(a * a))
        with np.errstate(divide="ignore"):
            factor = np.where(norm > L, L / np.where(norm > 0, norm, 1.0), 1.0)
        return a * factor

    return scale(y, 1 if y.ndim > 1 else 0), scale(z, 1 if z.ndim > 2 else 0)


def projected_scalar_driver(s: Projectable, t, prefix, u, v):
    """Driver ``a'P + u Q + v R`` of the projected one-dimensional BSDE.

    ``u`` has shape ``(M,)``, ``v`` shape ``(M, n)``; returns ``(M,)``.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    p = np.asarray(s.P(t, prefix, u, v), dtype=float)
    q = np.asarray(s.Q(t, prefix, u, v), dtype=float)
    r = np.asarray(s.R(t, prefix, u, v), dtype=float)
    return p @ s.a + u * q + np.sum(v * r, axis=-1)


def apriori_y_bound(C: float, T: float, t):
    """``(C+1) exp((C+1)^2 (T-t) / 2)``, the global bound on |Y_t|."""
    t_arr = np.asarray(t, dtype=float)
    if C < 0:
        raise ValueError("C must be >= 0")
    if np.any(t_arr < 0) or np.any(t_arr > T):
        raise ValueError(f"t must lie in [0, {T}]")
    out = (C + 1.0) * np.exp((C + 1.0) ** 2 * (T - t_arr) / 2.0)
    return out if out.ndim else float(out)


def fbsde_q_bound(C: float, T: float) -> tuple[float, float]:
    """Return ``(a, C^2 e^{aT} (1+T))`` with ``a = 2C^2 + 2C + 1``.

    The second entry bounds ``|Q_t|^2`` for the forward-backward system.
    """
    if C < 0 or T < 0:
        raise ValueError("C and T must be >= 0")
    a = 2.0 * C * C + 2.0 * C + 1.0
    return a, C * C * math.exp(a * T) * (1.0 + T)


# --------------------------------------------------------------------------
# Sampling validation of declared structure
# --------------------------------------------------------------------------

@dataclass
class ConditionResult:
    name: str
    max_margin: float
    passes: bool
    samples: int
    nonfinite: int = 0
    note: str = ""

    def to_dict(self):
        return {
            "name": self.name,
            "max_margin": self.max_margin,
            "passes": self.passes,
            "samples": self.samples,
            "nonfinite": self.nonfinite,
            "note": self.note,
        }


@dataclass
class ValidationReport:
    problem: str
    conditions: list[ConditionResult]

    @property
    def passes(self) -> bool:
        return all(c.passes for c in self.conditions)

    def __getitem__(self, name: str) -> ConditionResult:
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        return {"problem": self.problem, "passes": self.passes,
                "conditions": [c.to_dict() for c in self.conditions]}


def _random_vectors(rng, count, shape):
    """Gaussian directions with log-uniform radii in [1e-2, 1e2], plus some exact zeros."""
    raw = rng.standard_normal((count,) + shape)
    norms = np.sqrt(np.sum(raw.reshape(count, -1) ** 2, axis=1))
    norms[norms == 0] = 1.0
    radii = 10.0 ** rng.uniform(-2.0, 2.0, size=count)
    out = raw / norms.reshape((count,) + (1,) * len(shape)) * radii.reshape((count,) + (1,) * len(shape))
    out[: max(1, count // 50)] = 0.0
    return out


def _norm_rows(a):
    return np.sqrt(np.sum(a.reshape(len(a), -1) ** 2, axis=1))


class _Collector:
    def __init__(self, name):
        self.name = name
        self.margin = -np.inf
        self.count = 0
        self.nonfinite = 0

    def add(self, margins):
        margins = np.asarray(margins, dtype=float)
        bad = ~np.isfinite(margins)
        self.nonfinite += int(bad.sum())
        self.count += int(margins.size)
        good = margins[~bad]
        if good.size:
            self.margin = max(self.margin, float(good.max()))

    def result(self, note=""):
        passes = self.nonfinite == 0 and self.margin <= 0.0
        return ConditionResult(self.name, self.margin, passes, self.count, self.nonfinite, note)


def _safe(fn, *args):
    with np.errstate(all="ignore"):
        try:
            return np.asarray(fn(*args), dtype=float)
        except (FloatingPointError, OverflowError, ValueError, ZeroDivisionError):
            return None


def validate_problem(p: BsdeProblem, samples: int = 10_000, seed: int = 0,
                     steps: int = 16) -> ValidationReport:
    """Sample the declared structural inequalities at random points.

    Each condition reports the largest observed ``lhs - rhs``; a condition
    passes when that margin is ``<= 0`` at every sampled point and no evaluator
    returned a non-finite value.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    from .simulate import TimeGrid, sample_brownian

    rng = np.random.default_rng(seed)
    grid = TimeGrid(p.T, steps)
    ens = sample_brownian(grid, samples, p.n, seed)
    paths = ens.W
    d, n = p.d, p.n
    knots = rng.integers(0, steps, size=samples)
    y = _random_vectors(rng, samples, (d,))
    z = _random_vectors(rng, samples, (d, n))
    y2 = _random_vectors(rng, samples, (d,))
    z2 = _random_vectors(rng, samples, (d, n))
    # half the second points are small perturbations of the first
    near = rng.random(samples) < 0.5
    y2[near] = y[near] + 1e-3 * y2[near]
    z2[near] = z[near] + 1e-3 * z2[near]

    results: list[ConditionResult] = []
    s = p.structure

    xi = _safe(p.terminal, paths)
    if p.terminal_bound is not None or s.kind in ("subquadratic", "markovian"):
        bound = p.terminal_bound
        if s.kind == "subquadratic":
            bound = s.C
        term = _Collector("B1" if s.kind == "subquadratic" else "terminal_bound")
        if s.kind == "markovian":
            term.name = "A1"
        if xi is None or bound is None:
            term.nonfinite += samples if xi is None else 0
            results.append(term.result("no declared terminal bound" if bound is None else "terminal evaluator failed"))
        else:
            term.add(_norm_rows(xi.reshape(samples, -1)) - bound)
            results.append(term.result())

    finite = _Collector("driver_finite")
    by_knot = {}
    for k in np.unique(knots):
        by_knot[int(k)] = np.nonzero(knots == k)[0]

    def eval_grouped(fn, yy, zz, markov=False):
        out = np.full((samples, d), np.nan)
        for k, idx in by_knot.items():
            t = grid.t[k]
            if markov:
                res = _safe(fn, t, paths[idx, k, :], yy[idx], zz[idx])
            else:
                res = _safe(fn, t, paths[idx, : k + 1, :], yy[idx], zz[idx])
            if res is not None:
                out[idx] = res.reshape(len(idx), d)
        return out

    f1 = eval_grouped(p.driver, y, z)
    finite.add(np.where(np.all(np.isfinite(f1), axis=1), -1.0, np.nan))
    results.append(finite.result())

    ny, nz = _norm_rows(y), _norm_rows(z)
    ny2, nz2 = _norm_rows(y2), _norm_rows(z2)

    if s.kind == "subquadratic":
        C, eps, rho = s.C, s.eps, s.rho
        b2 = _Collector("B2")
        b2.add(_norm_rows(f1) - C * (1 + ny + rho(ny) * nz ** (2 - eps)))
        results.append(b2.result())

        f2 = eval_grouped(p.driver, y2, z2)
        b3 = _Collector("B3")
        lhs = _norm_rows(f1 - f2)
        rhs = rho(np.maximum(ny, ny2)) * (_norm_rows(y - y2)
                                          + (1 + np.maximum(nz, nz2) ** (1 - eps)) * _norm_rows(z - z2))
        b3.add(lhs - rhs)
        results.append(b3.result())

        Fv = eval_grouped(s.F, y, z)
        Gv = eval_grouped(s.G, y, z)
        b4f = _Collector("B4-F")
        b4f.add(np.sum(y * Fv, axis=1) - C * ny * (1 + ny + nz))
        results.append(b4f.result())
        b4g = _Collector("B4-G")
        ytz = _norm_rows(np.einsum("md,mdn->mn", y, z))
        # vacuous where y'z = 0: the inequality is applied literally
        b4g.add(np.sum(y * Gv, axis=1) - ytz * rho(ny) * nz)
        results.append(b4g.result())
        split = _Collector("B4-split")
        split.add(_norm_rows(Fv + Gv - f1) - 1e-9 * (1 + _norm_rows(f1)))
        results.append(split.result())

    elif s.kind == "markovian":
        x = paths[np.arange(samples), knots, :]
        Fv = np.full((samples, d), np.nan)
        Gv = np.full((samples, n), np.nan)
        for k, idx in by_knot.items():
            r = _safe(s.F, grid.t[k], x[idx], y[idx], z[idx])
            if r is not None:
                Fv[idx] = r.reshape(len(idx), d)
            r = _safe(s.G, grid.t[k], x[idx], y[idx], z[idx])
            if r is not None:
                Gv[idx] = r.reshape(len(idx), n)
        C = s.growth_constant
        if C is not None:
            a2 = _Collector("A2")
            a2.add(np.sum(y * Fv, axis=1) - C * ny * (1 + ny + nz))
            results.append(a2.result())
        if s.rho is not None:
            a3 = _Collector("A3")
            a3.add(_norm_rows(Gv) - s.rho(ny) * (1 + nz))
            results.append(a3.result())

    elif s.kind == "projectable":
        u = y @ s.a
        v = np.einsum("d,mdn->mn", s.a, z)
        Pv = np.full((samples, d), np.nan)
        Qv = np.full(samples, np.nan)
        Rv = np.full((samples, n), np.nan)
        for k, idx in by_knot.items():
            pre = paths[idx, : k + 1, :]
            r = _safe(s.P, grid.t[k], pre, u[idx], v[idx])
            if r is not None:
                Pv[idx] = r.reshape(len(idx), d)
            r = _safe(s.Q, grid.t[k], pre, u[idx], v[idx])
            if r is not None:
                Qv[idx] = r.reshape(len(idx))
            r = _safe(s.R, grid.t[k], pre, u[idx], v[idx])
            if r is not None:
                Rv[idx] = r.reshape(len(idx), n)
        au = np.abs(u)
        av = _norm_rows(v)
        c = _Collector("P-growth")
        c.add(_norm_rows(Pv) - s.C * (1 + au))
        results.append(c.result())
        c = _Collector("Q-bound")
        c.add(np.abs(Qv) - s.C)
        results.append(c.result())
        c = _Collector("R-growth")
        c.add(_norm_rows(Rv) - (s.C + s.rho(au) * av))
        results.append(c.result())

    return ValidationReport(p.name, results)
