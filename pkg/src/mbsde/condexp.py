"""Conditional expectations on a path ensemble and extraction of Z.

Two backends:

* regression (least-squares Monte Carlo): the payload is projected on a basis
  of the knot state.  Singular values below ``rcond`` times the largest are
  truncated.  The pseudo-inverse factor of each knot's design is cached on a
  :class:`KnotRegressor`, so repeated projections at the same knot (Picard
  iterations) cost a few matrix products.
* nested: brute-force resimulation of ``B`` Brownian suffixes from each
  conditioning path.  Expensive, unbiased, and the reference the regression
  backend is checked against.

Z at knot k is the slope of ``Y_{k+1}`` on ``dW_k`` given the knot state.  In
the regression backend this is one joint fit on an intercept block
``phi(x)``, a slope block ``phi(x) dW_k^i`` and a second-order block
``phi(x) (dW_k^i dW_k^l - 1{i=l} dt)``.  The population value of the slope
block is ``E_k[Y_{k+1} dW_k'] / dt``; the other blocks absorb the conditional
mean and the curvature and keep the variance of the slope estimate small.
"""

from __future__ import annotations

import csv
import functools
import itertools
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np

from .simulate import MeasureWeight, PathEnsemble, brownian_suffixes

__all__ = [
    "BasisSpec",
    "FittedBasis",
    "CondExpEstimate",
    "RegressionEstimator",
    "NestedEstimator",
    "KnotRegressor",
    "JointFit",
    "NestedBudgetError",
    "condexp_regress",
    "condexp_nested",
    "extract_z",
    "weighted_condexp",
    "export_coefficients",
]

_CUT = 2.5  # piecewise-constant cells cover +-2.5 standard deviations


class NestedBudgetError(RuntimeError):
    pass


@dataclass(frozen=True)
class BasisSpec:
    """Regression basis over the knot state.

    ``family`` is ``"polynomial"`` (all monomials of total degree <= ``degree``
    in the standardised state) or ``"piecewise"`` (indicators of ``cells``
    equal cells per coordinate on +-2.5 sd, plus the constant).  ``lags``
    appends the last ``lags`` increments to the Brownian state for
    path-dependent payloads.

    The joint Z fit multiplies a basis of degree ``slope_degree`` (default
    ``degree``) by each ``dW_k^i``, and a basis of degree ``curvature_degree``
    (default ``slope_degree - 2``; ``-1`` switches it off) by each
    ``dW_k^i dW_k^l - 1{i=l} dt``.  Both extra blocks have conditional mean
    zero, so they leave the intercept block unbiased.
    """

    family: str = "polynomial"
    degree: int = 4
    cells: int = 8
    lags: int = 0
    slope_degree: Optional[int] = None
    curvature_degree: Optional[int] = None

    def __post_init__(self):
        if self.family not in ("polynomial", "piecewise"):
            raise ValueError(f"unknown basis family {self.family!r}")
        if self.degree < 0 or self.cells < 1 or self.lags < 0:
            raise ValueError("degree, cells and lags must be nonnegative (cells >= 1)")
        if self.slope_degree is not None and self.slope_degree < 0:
            raise ValueError("slope_degree must be nonnegative")
        if self.curvature_degree is not None and self.curvature_degree < -1:
            raise ValueError("curvature_degree must be >= -1")

    def block_specs(self) -> tuple["BasisSpec", Optional["BasisSpec"]]:
        """Bases multiplying the ``dW`` block and the second-order block."""
        sd = self.degree if self.slope_degree is None else self.slope_degree
        cd = max(sd - 2, 0) if self.curvature_degree is None else self.curvature_degree
        base = replace(self, slope_degree=None, curvature_degree=None)
        slope = replace(base, degree=sd)
        curv = None if cd < 0 else replace(base, degree=cd)
        return slope, curv

    def size(self, dim: int) -> int:
        if self.family == "polynomial":
            return len(_exponents(dim, self.degree))
        return self.cells ** dim

    def fit(self, x: np.ndarray) -> "FittedBasis":
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        center = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 1e-12 * (1.0 + np.abs(center)), scale, 0.0)
        return FittedBasis(self, center, scale)


def _exponents(dim: int, degree: int) -> list[tuple[int, ...]]:
    out = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(dim), total):
            e = [0] * dim
            for i in combo:
                e[i] += 1
            out.append(tuple(e))
    return out


@functools.lru_cache(maxsize=None)
def _monomial_parents(dim: int, degree: int) -> tuple[tuple[int, int], ...]:
    """For each non-constant monomial, (column of a monomial one degree lower, variable)."""
    exps = _exponents(dim, degree)
    index = {e: j for j, e in enumerate(exps)}
    out = []
    for e in exps[1:]:
        var = next(i for i, p in enumerate(e) if p)
        lower = list(e)
        lower[var] -= 1
        out.append((index[tuple(lower)], var))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class FittedBasis:
    """A basis standardised on one knot's sample; evaluable on new states."""

    spec: BasisSpec
    center: np.ndarray
    scale: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.center)

    def __len__(self) -> int:
        return self.spec.size(self.dim)

    def standardise(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        safe = np.where(self.scale > 0, self.scale, 1.0)
        return np.where(self.scale > 0, (x - self.center) / safe, 0.0)

    def __call__(self, x) -> np.ndarray:
        u = self.standardise(x)
        M = u.shape[0]
        if self.spec.family == "polynomial":
            parents = _monomial_parents(self.dim, self.spec.degree)
            # column-major so each monomial is one contiguous product
            cols = np.empty((len(parents) + 1, M))
            cols[0] = 1.0
            ut = np.ascontiguousarray(u.T)
            for j, (src, var) in enumerate(parents, start=1):
                np.multiply(cols[src], ut[var], out=cols[j])
            return cols.T
        cells = self.spec.cells
        edges = np.linspace(-_CUT, _CUT, cells + 1)[1:-1]
        idx = np.zeros(M, dtype=int)
        for i in range(self.dim):
            idx = idx * cells + np.searchsorted(edges, u[:, i], side="right")
        cols = np.zeros((M, cells ** self.dim))
        cols[:, 0] = 1.0
        hit = idx > 0
        cols[np.nonzero(hit)[0], idx[hit]] = 1.0
        return cols


@dataclass
class CondExpEstimate:
    """Per-path conditional expectation estimates at one knot.

    ``values`` has shape ``(M, q)``.  ``se`` is the standard error of the
    knot-mean of ``values`` per coordinate; ``pointwise_se`` (when computed)
    is the per-path standard error of each fitted value.
    """

    values: np.ndarray
    method: str
    se: np.ndarray
    coef: Optional[np.ndarray] = None
    basis: Optional[FittedBasis] = None
    pointwise_se: Optional[np.ndarray] = None
    rank: Optional[int] = None
    rank_deficient: bool = False
    ess: Optional[float] = None


# --------------------------------------------------------------------------
# Regression backend
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RegressionEstimator:
    basis: BasisSpec = field(default_factory=BasisSpec)
    safety_factor: float = 10.0
    rcond: float = 1e-10

    kind = "regression"

    def bind(self, ensemble: PathEnsemble, states: Optional[np.ndarray] = None) -> "KnotRegressor":
        return KnotRegressor(ensemble, self, states)


@dataclass(frozen=True)
class NestedEstimator:
    branching: int = 1000
    seed: int = 0
    budget: float = 5e7

    kind = "nested"

    def __post_init__(self):
        if self.branching < 2:
            raise ValueError("nested estimation needs branching B >= 2")


Estimator = Union[RegressionEstimator, NestedEstimator]


def _factor(A: np.ndarray, rcond: float):
    """Truncated SVD of ``A``: returns ``V diag(1/s)`` restricted to the kept rank."""
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    keep = s > rcond * s[0] if s.size and s[0] > 0 else np.zeros_like(s, dtype=bool)
    rank = int(keep.sum())
    Vs = Vt[keep].T / s[keep]
    return Vs, rank


# Below this eigenvalue ratio the Gram route loses the digits the rcond cut
# needs, and the SVD of the design is used instead.
_GRAM_COND = 1e-12


def _solver(A: np.ndarray, rcond: float):
    """Pseudo-inverse factor ``P`` with ``coef = P @ (A' y)``, plus the kept rank.

    Uses the eigendecomposition of ``A'A`` (singular values are the square
    roots of its eigenvalues) unless the design is too ill-conditioned for
    that, in which case it falls back to the SVD of ``A``.
    """
    lam, V = np.linalg.eigh(A.T @ A)
    top = lam[-1] if lam.size else 0.0
    if top > 0 and lam[0] > _GRAM_COND * top:
        s = np.sqrt(lam)
        keep = s > rcond * s[-1]
        Vk = V[:, keep]
        return (Vk / lam[keep]) @ Vk.T, int(keep.sum())
    Vs, rank = _factor(A, rcond)
    return Vs @ Vs.T, rank


def _knot_se(payload: np.ndarray) -> np.ndarray:
    M = payload.shape[0]
    if M < 2:
        return np.full(payload.shape[1:], np.inf)
    return payload.std(axis=0, ddof=1) / np.sqrt(M)


def _curvature_terms(e: np.ndarray) -> list[np.ndarray]:
    """Second-order Hermite terms of the normalised increments ``e = dW / sqrt(dt)``."""
    n = e.shape[1]
    return [e[:, i] * e[:, l] - (1.0 if i == l else 0.0) for i in range(n) for l in range(i, n)]


def _lstsq(P: np.ndarray, A: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Coefficients from the factor ``P``, with one step of iterative refinement."""
    coef = P @ (A.T @ Y)
    coef += P @ (A.T @ (Y - A @ coef))
    return coef


@dataclass
class JointFit:
    """Result of the joint fit of a payload at one knot.

    ``values`` (``(M, q)``) estimates ``E_k[payload]``; ``Z`` (``(M, q, n)``)
    the covariation ``E_k[payload dW_k'] / dt``; ``curvature`` is the fitted
    second-order martingale increment (zero when that block is off).
    ``coef_y`` is ``(p, q)`` and ``coef_z`` is ``(p_z, q, n)`` on the bases
    ``basis`` and ``slope_basis``.
    """

    values: np.ndarray
    Z: np.ndarray
    curvature: np.ndarray
    coef_y: np.ndarray
    coef_z: np.ndarray
    basis: FittedBasis
    slope_basis: FittedBasis
    rank: int
    rank_deficient: bool
    sigma: Optional[np.ndarray] = None
    value_cov: Optional[np.ndarray] = None

    def value_se(self, x) -> np.ndarray:
        """Pointwise standard error of the fitted value at states ``x``: ``(K, q)``."""
        A = self.basis(x)
        lev = np.einsum("mp,pq,mq->m", A, self.value_cov, A)
        return np.sqrt(np.clip(lev, 0.0, None))[:, None] * self.sigma[None, :]

    def martingale_increment(self, dW: np.ndarray) -> np.ndarray:
        """``Z dW + curvature``: the part of the payload's move with zero conditional mean."""
        return np.einsum("mqn,mn->mq", self.Z, dW) + self.curvature


class KnotRegressor:
    """Least-squares projections onto a basis of the per-knot state, with cached factorisations.

    ``states`` defaults to the Brownian ensemble itself (``W_k``, optionally
    with lagged increments); pass an ``(M, N+1, p)`` array to regress on a
    forward process instead.  Factorisations depend only on the ensemble, so
    they are computed once per knot and reused by every Picard iteration.
    """

    def __init__(self, ensemble: PathEnsemble, estimator: RegressionEstimator,
                 states: Optional[np.ndarray] = None):
        self.ensemble = ensemble
        self.estimator = estimator
        self.states = states
        self._bases: dict[int, tuple] = {}
        self._plain: dict[int, tuple] = {}
        self._joint: dict[int, tuple] = {}

    @property
    def spec(self) -> BasisSpec:
        return self.estimator.basis

    def state(self, k: int) -> np.ndarray:
        if self.states is not None:
            x = self.states[:, k]
            return x if x.ndim == 2 else x[:, None]
        W = self.ensemble.W
        parts = [W[:, k, :]]
        for lag in range(1, self.spec.lags + 1):
            j = max(k - lag, 0)
            parts.append(W[:, k, :] - W[:, j, :])
        return np.concatenate(parts, axis=1)

    def _fitted(self, k: int):
        if k not in self._bases:
            fb = self.spec.fit(self.state(k))
            sspec, cspec = self.spec.block_specs()
            sb = FittedBasis(sspec, fb.center, fb.scale)
            cb = None if cspec is None else FittedBasis(cspec, fb.center, fb.scale)
            self._bases[k] = (fb, sb, cb)
        return self._bases[k]

    def basis(self, k: int) -> FittedBasis:
        return self._fitted(k)[0]

    def _check_size(self, cols: int):
        M = self.ensemble.M
        if M < self.estimator.safety_factor * cols:
            raise ValueError(
                f"{M} paths are fewer than {self.estimator.safety_factor:g} x {cols} basis functions")

    def _plain_factor(self, k: int):
        if k not in self._plain:
            A = self.basis(k)(self.state(k))
            self._check_size(A.shape[1])
            P, rank = _solver(A, self.estimator.rcond)
            self._plain[k] = (P, rank, A.shape[1])
        return self._plain[k]

    def _joint_design(self, k: int, dW: np.ndarray):
        # increments enter normalised to unit variance so all blocks share a scale
        fb, sb, cb = self._fitted(k)
        x = self.state(k)
        e = dW / np.sqrt(self.ensemble.grid.dt)
        A = fb(x)
        blocks = [A]
        As = sb(x)
        blocks += [As * e[:, j:j + 1] for j in range(e.shape[1])]
        Ac = None
        if cb is not None:
            Ac = cb(x)
            blocks += [Ac * h[:, None] for h in _curvature_terms(e)]
        return np.concatenate(blocks, axis=1), A, As, Ac, e

    def _joint_factor(self, k: int, J: np.ndarray):
        if k not in self._joint:
            self._check_size(J.shape[1])
            P, rank = _solver(J, self.estimator.rcond)
            self._joint[k] = (P, rank, J.shape[1])
        return self._joint[k]

    def project(self, k: int, payload, pointwise: bool = False) -> CondExpEstimate:
        """Fitted ``E[payload | state_k]`` for a ``(M,)`` or ``(M, q)`` payload."""
        Y = np.asarray(payload, dtype=float)
        squeeze = Y.ndim == 1
        Y2 = Y[:, None] if squeeze else Y.reshape(Y.shape[0], -1)
        fb = self.basis(k)
        P, rank, cols = self._plain_factor(k)
        A = fb(self.state(k))
        coef = _lstsq(P, A, Y2)
        fitted = A @ coef
        pse = None
        if pointwise:
            resid = Y2 - fitted
            dof = max(Y2.shape[0] - rank, 1)
            sigma = np.sqrt(np.sum(resid ** 2, axis=0) / dof)
            lev = np.einsum("mp,pq,mq->m", A, P, A)
            pse = np.sqrt(np.clip(lev, 0.0, None))[:, None] * sigma[None, :]
        est = CondExpEstimate(fitted, "regression", _knot_se(Y2), coef, fb, pse, rank, rank < cols)
        if squeeze:
            est.values = fitted[:, 0]
            est.se = est.se[0]
            est.coef = coef[:, 0]
            if pse is not None:
                est.pointwise_se = pse[:, 0]
        return est

    def joint(self, k: int, payload, increments: Optional[np.ndarray] = None,
              weights: Optional[np.ndarray] = None) -> JointFit:
        """Joint fit of ``payload`` (``(M, q)``) on intercept, ``dW`` and second-order blocks.

        ``increments`` replaces ``dW_k`` (e.g. Girsanov-shifted increments) and
        ``weights`` turns the fit into weighted least squares; neither is cached.
        """
        Y = np.asarray(payload, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        q = Y.shape[1]
        n = self.ensemble.n
        dW = self.ensemble.dW[:, k, :] if increments is None else np.asarray(increments, dtype=float)
        J, A, As, Ac, e = self._joint_design(k, dW)
        p = A.shape[1]
        if increments is None and weights is None:
            P, rank, cols = self._joint_factor(k, J)
            coef = _lstsq(P, J, Y)
            resid = Y - J @ coef
        else:
            self._check_size(J.shape[1])
            if weights is not None:
                sw = np.sqrt(np.asarray(weights, dtype=float))[:, None]
                Jw, Yw = J * sw, Y * sw
            else:
                Jw, Yw = J, Y
            P, rank = _solver(Jw, self.estimator.rcond)
            cols = J.shape[1]
            coef = _lstsq(P, Jw, Yw)
            resid = Yw - Jw @ coef
        sigma = np.sqrt(np.sum(resid ** 2, axis=0) / max(Y.shape[0] - rank, 1))
        ps = As.shape[1]
        coef_y = coef[:p]
        coef_z = np.stack([coef[p + ps * j: p + ps * (j + 1)] for j in range(n)], axis=2)
        coef_z /= np.sqrt(self.ensemble.grid.dt)
        values = A @ coef_y
        Z = np.einsum("mp,pqn->mqn", As, coef_z)
        curvature = np.zeros_like(values)
        if Ac is not None:
            pc = Ac.shape[1]
            off = p + ps * n
            for i, h in enumerate(_curvature_terms(e)):
                curvature += (Ac @ coef[off + pc * i: off + pc * (i + 1)]) * h[:, None]
        fb, sb, _ = self._fitted(k)
        return JointFit(values, Z, curvature, coef_y, coef_z, fb, sb, rank, rank < cols,
                        sigma, P[:p, :p])

    def slope(self, k: int, next_value, increments: Optional[np.ndarray] = None,
              weights: Optional[np.ndarray] = None):
        """Covariation estimate of ``Z_k`` from ``next_value`` (``(M, d)``).

        Returns ``(Z, coef)`` with ``Z`` of shape ``(M, d, n)`` and ``coef`` of
        shape ``(p_z, d, n)`` on the slope basis.
        """
        fit = self.joint(k, next_value, increments, weights)
        return fit.Z, fit.coef_z

    def project_weighted(self, k: int, payload, weights) -> CondExpEstimate:
        """Weighted least squares: estimates ``E[w X | x] / E[w | x]``."""
        Y = np.asarray(payload, dtype=float)
        squeeze = Y.ndim == 1
        Y2 = Y[:, None] if squeeze else Y.reshape(Y.shape[0], -1)
        w = np.asarray(weights, dtype=float)
        fb = self.basis(k)
        A = fb(self.state(k))
        sw = np.sqrt(w)[:, None]
        P, rank = _solver(A * sw, self.estimator.rcond)
        coef = _lstsq(P, A * sw, Y2 * sw)
        fitted = A @ coef
        ess = float(w.sum() ** 2 / np.sum(w * w))
        est = CondExpEstimate(fitted, "regression-weighted", _knot_se(Y2 * w[:, None]),
                              coef, fb, None, rank, rank < A.shape[1], ess)
        if squeeze:
            est.values, est.se, est.coef = fitted[:, 0], est.se[0], coef[:, 0]
        return est


def condexp_regress(payload, k: int, basis: BasisSpec, state: np.ndarray,
                    safety_factor: float = 10.0, rcond: float = 1e-10) -> CondExpEstimate:
    """One-off least-squares estimate of ``E[payload | state]`` at knot ``k``.

    Columns whose singular values fall below ``rcond`` times the largest are
    dropped; the estimate is then flagged ``rank_deficient``.
    """
    state = np.asarray(state, dtype=float)
    if state.ndim == 1:
        state = state[:, None]
    M = state.shape[0]
    fb = basis.fit(state)
    A = fb(state)
    if M < safety_factor * A.shape[1]:
        raise ValueError(f"{M} paths are fewer than {safety_factor:g} x {A.shape[1]} basis functions")
    Y = np.asarray(payload, dtype=float)
    squeeze = Y.ndim == 1
    Y2 = Y[:, None] if squeeze else Y
    Vs, rank = _factor(A, rcond)
    U = A @ Vs
    UtY = U.T @ Y2
    fitted = U @ UtY
    coef = Vs @ UtY
    resid = Y2 - fitted
    sigma = np.sqrt(np.sum(resid ** 2, axis=0) / max(M - rank, 1))
    pse = np.sqrt(np.sum(U * U, axis=1))[:, None] * sigma[None, :]
    est = CondExpEstimate(fitted, "regression", _knot_se(Y2), coef, fb, pse, rank, rank < A.shape[1])
    if squeeze:
        est.values, est.se, est.coef, est.pointwise_se = fitted[:, 0], est.se[0], coef[:, 0], pse[:, 0]
    return est


# --------------------------------------------------------------------------
# Nested backend
# --------------------------------------------------------------------------

def _nested_paths(ensemble, paths):
    return np.arange(ensemble.M) if paths is None else np.atleast_1d(np.asarray(paths, dtype=int))


def _guard(ensemble, k, K, B, budget):
    cost = float(K) * B * max(ensemble.N - k, 1)
    if cost > budget:
        raise NestedBudgetError(
            f"nested estimate needs {K} x {B} x {ensemble.N - k} = {cost:.3g} path-steps, budget {budget:.3g}")


def _iter_branches(ensemble, k, paths, est: NestedEstimator, chunk_steps=2_000_000):
    per = est.branching * (ensemble.N + 1) * ensemble.n
    chunk = max(1, chunk_steps // max(per, 1))
    for start in range(0, len(paths), chunk):
        idx = paths[start:start + chunk]
        yield start, idx, brownian_suffixes(ensemble, k, idx, est.branching, est.seed)


def _call_payload(payload, flat):
    out = np.asarray(payload(flat), dtype=float)
    return out.reshape(flat.shape[0], -1)


def condexp_nested(payload: Callable, k: int, ensemble: PathEnsemble,
                   estimator: NestedEstimator = NestedEstimator(), paths=None) -> CondExpEstimate:
    """Average ``payload`` over ``B`` resimulated suffixes of each conditioning path.

    ``payload`` maps full paths ``(K, N+1, n)`` to ``(K,)`` or ``(K, q)``.
    ``values`` and ``pointwise_se`` are per conditioning path.
    """
    paths = _nested_paths(ensemble, paths)
    B = estimator.branching
    _guard(ensemble, k, len(paths), B, estimator.budget)
    vals = None
    pse = None
    for start, idx, suff in _iter_branches(ensemble, k, paths, estimator):
        K = len(idx)
        flat = suff.reshape(K * B, ensemble.N + 1, ensemble.n)
        out = _call_payload(payload, flat).reshape(K, B, -1)
        if vals is None:
            vals = np.empty((len(paths), out.shape[2]))
            pse = np.empty_like(vals)
        vals[start:start + K] = out.mean(axis=1)
        pse[start:start + K] = out.std(axis=1, ddof=1) / np.sqrt(B)
    se = _knot_se(vals) if len(paths) > 1 else pse[0]
    return CondExpEstimate(vals, "nested", se, pointwise_se=pse)


def _nested_slope(payload, k, ensemble, estimator, paths):
    paths = _nested_paths(ensemble, paths)
    B = estimator.branching
    _guard(ensemble, k, len(paths), B, estimator.budget)
    n = ensemble.n
    Z = None
    for start, idx, suff in _iter_branches(ensemble, k, paths, estimator):
        K = len(idx)
        flat = suff.reshape(K * B, ensemble.N + 1, n)
        out = _call_payload(payload, flat).reshape(K, B, -1)
        dW = suff[:, :, k + 1, :] - suff[:, :, k, :]
        if Z is None:
            Z = np.empty((len(paths), out.shape[2], n))
        for i in range(K):
            X = np.concatenate([np.ones((B, 1)), dW[i]], axis=1)
            coef, *_ = np.linalg.lstsq(X, out[i], rcond=None)
            Z[start + i] = coef[1:].T
    return Z


# --------------------------------------------------------------------------
# Public entry points
# --------------------------------------------------------------------------

def extract_z(next_value, k: int, ensemble: PathEnsemble, estimator: Estimator = RegressionEstimator(),
              regressor: Optional[KnotRegressor] = None, paths=None) -> np.ndarray:
    """Martingale-representation integrand at knot ``k``, shape ``(M, d, n)``.

    Regression: ``next_value`` is ``Y_{k+1}`` as an ``(M, d)`` array.
    Nested: ``next_value`` is a path functional whose conditional expectation
    at ``k+1`` is ``Y_{k+1}``; per conditioning path the slope of its suffix
    values on the branch increments ``dW_k`` is returned (exact for payloads
    affine in ``dW_k``).
    """
    if isinstance(estimator, NestedEstimator):
        return _nested_slope(next_value, k, ensemble, estimator, paths)
    reg = regressor if regressor is not None else estimator.bind(ensemble)
    return reg.slope(k, next_value)[0]


def weighted_condexp(payload, k: int, weight, estimator: Estimator = RegressionEstimator(),
                     ensemble: Optional[PathEnsemble] = None, regressor: Optional[KnotRegressor] = None,
                     paths=None) -> CondExpEstimate:
    """Conditional expectation under ``E_T . P``, i.e. ``E_k[payload E_T / E_k]``.

    Regression: ``weight`` is a :class:`MeasureWeight` on the same ensemble and
    the estimate is a weighted least-squares fit with weights ``E_T / E_k``.
    Nested: ``weight`` is a callable ``H(t, prefix) -> (K, n)`` and the
    stochastic exponential is rebuilt along each suffix.
    A warning is raised when the effective sample size drops below 10%.
    """
    if isinstance(estimator, NestedEstimator):
        if ensemble is None:
            raise ValueError("nested weighted estimation needs the ensemble")
        H_fn = weight
        grid = ensemble.grid
        t = grid.t

        def reweighted(flat):
            logw = np.zeros(flat.shape[0])
            for j in range(k, grid.N):
                H = np.asarray(H_fn(t[j], flat[:, : j + 1, :]), dtype=float).reshape(flat.shape[0], -1)
                dW = flat[:, j + 1, :] - flat[:, j, :]
                logw += np.sum(H * dW, axis=1) - 0.5 * np.sum(H * H, axis=1) * grid.dt
            vals = _call_payload(payload, flat)
            return vals * np.exp(logw)[:, None]

        return condexp_nested(reweighted, k, ensemble, estimator, paths)

    if not isinstance(weight, MeasureWeight):
        raise TypeError("regression weighted estimation needs a MeasureWeight")
    reg = regressor if regressor is not None else estimator.bind(ensemble)
    w = weight.ratio(k)
    est = reg.project_weighted(k, payload, w)
    M = len(w)
    if est.ess < 0.1 * M:
        warnings.warn(f"effective sample size {est.ess:.1f} is below 10% of {M} paths", RuntimeWarning)
    return est


def export_coefficients(path, tables) -> None:
    """Write ``knot, coordinate, basis_index, coefficient`` rows.

    ``tables`` maps knot -> coefficient array of shape ``(p,)`` or ``(p, q)``.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["knot", "coordinate", "basis_index", "coefficient"])
        for k in sorted(tables):
            c = np.asarray(tables[k], dtype=float)
            c = c.reshape(c.shape[0], -1)
            for q in range(c.shape[1]):
                for i in range(c.shape[0]):
                    w.writerow([k, q, i, repr(float(c[i, q]))])
