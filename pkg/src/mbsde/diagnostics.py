"""Norm estimates, a priori bound verdicts, discrete residuals and the (B4) drift.

The BMO norm of ``Z`` is estimated on the grid: for every knot ``t_k`` the
conditional expectation ``E_k sum_{j>=k} |Z_j|^2 dt`` is estimated and its
maximum over paths and knots is square-rooted.  Stopping times that take
grid values are covered, because the conditional expectation at a stopping
time is a path-by-path selection of the knot-wise ones.  Off-grid stopping
times are not, so the estimate is a lower-bound proxy for the continuous-time
norm.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .condexp import KnotRegressor, NestedEstimator, RegressionEstimator, condexp_nested
from .problem import RhoSpec, apriori_y_bound, fbsde_q_bound
from .simulate import MeasureWeight, PathEnsemble, stochastic_exponential

__all__ = [
    "BMO_NOTE",
    "BoundVerdict",
    "ResidualReport",
    "DriftCheck",
    "DiagnosticsReport",
    "estimate_bmo",
    "h2_norm",
    "sup_norm",
    "residual_check",
    "check_y_bound",
    "check_q_bound",
    "build_b4_drift",
    "drift_check",
    "export_bound_curve",
]

BMO_NOTE = ("BMO estimated as the max over grid knots and paths of the regressed "
            "E_k sum_{j>=k} |Z_j|^2 dt; a lower-bound proxy for the supremum over "
            "all stopping times")


def _frob2(Z: np.ndarray) -> np.ndarray:
    return np.sum(Z * Z, axis=tuple(range(2, Z.ndim)))


def sup_norm(Y: np.ndarray) -> float:
    """Max over paths and knots of the Euclidean norm of ``Y`` (``(M, K, d)``)."""
    return float(np.sqrt(np.max(np.sum(Y * Y, axis=-1)))) if Y.size else 0.0


def h2_norm(Z: np.ndarray, dt: float) -> float:
    """``(E sum_k |Z_k|^2 dt)^(1/2)`` for ``Z`` of shape ``(M, K, d, n)``."""
    return float(math.sqrt(np.mean(np.sum(_frob2(Z), axis=1)) * dt)) if Z.size else 0.0


def estimate_bmo(Z, dt: float, estimator: Union[KnotRegressor, RegressionEstimator, NestedEstimator],
                 start: int = 0, ensemble: Optional[PathEnsemble] = None, paths=None,
                 knots=None, stop: Optional[int] = None) -> float:
    """Grid BMO estimate of ``Z`` on knots ``start, start+1, ...``.

    Regression: ``Z`` is an array ``(M, K, d, n)`` covering knots
    ``start .. start+K-1`` and ``estimator`` is a bound :class:`KnotRegressor`
    (or a :class:`RegressionEstimator` together with ``ensemble``).

    Nested: ``Z`` is a callable ``z(j, paths) -> (B, d, n)`` evaluated on
    resimulated full paths, ``stop`` is the window end, and ``paths`` picks
    the conditioning paths (default: all).  ``knots`` restricts the maximum
    to a subset of knots in either mode.
    """
    if isinstance(estimator, NestedEstimator):
        if ensemble is None or stop is None:
            raise ValueError("nested BMO estimation needs the ensemble and the window end")
        ks = range(start, stop) if knots is None else knots
        best = 0.0
        for k in ks:
            def payload(flat, k=k):
                total = np.zeros(flat.shape[0])
                for j in range(k, stop):
                    zj = np.asarray(Z(j, flat), dtype=float)
                    total += np.sum(zj.reshape(len(zj), -1) ** 2, axis=1) * dt
                return total

            est = condexp_nested(payload, k, ensemble, estimator, paths)
            best = max(best, float(np.max(est.values)))
        return math.sqrt(max(best, 0.0))

    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 3:
        Z = Z[..., None]
    if Z.shape[1] == 0:
        return 0.0
    reg = estimator
    if isinstance(estimator, RegressionEstimator):
        if ensemble is None:
            raise ValueError("regression BMO estimation needs the ensemble")
        reg = estimator.bind(ensemble)
    tail = np.cumsum(_frob2(Z)[:, ::-1], axis=1)[:, ::-1] * dt
    ks = range(Z.shape[1]) if knots is None else [k - start for k in knots]
    best = 0.0
    for i in ks:
        s = tail[:, i]
        if np.ptp(s) == 0.0:
            # a deterministic tail is its own conditional expectation
            best = max(best, float(s[0]))
            continue
        # a conditional expectation stays inside the payload's range; polynomial fits
        # can leave it in the sparse tails, which would dominate the maximum
        vals = np.clip(reg.project(start + i, s).values, s.min(), s.max())
        best = max(best, float(np.max(vals)))
    return math.sqrt(max(best, 0.0))


# --------------------------------------------------------------------------
# Residuals
# --------------------------------------------------------------------------

@dataclass
class ResidualReport:
    t: list
    mean: list
    se: list
    mean_sq: list
    max_abs: list
    flagged: list
    passes: bool

    @property
    def total_mean_sq(self) -> float:
        return float(np.mean(self.mean_sq)) if self.mean_sq else 0.0

    def to_dict(self):
        return asdict(self) | {"total_mean_sq": self.total_mean_sq}


def residual_check(problem, solution, ensemble: PathEnsemble, se_mult: float = 3.0,
                   atol: float = 1e-10) -> ResidualReport:
    """``r_k = Y_k - Y_{k+1} - f(t_k, Y_k, Z_k) dt + Z_k dW_k`` on the solution's window.

    A knot is flagged when its mean residual differs from zero by more than
    ``se_mult`` standard errors plus ``atol``.
    """
    a, b = solution.window
    t = ensemble.grid.t
    dt = ensemble.grid.dt
    out = {key: [] for key in ("t", "mean", "se", "mean_sq", "max_abs", "flagged")}
    M = ensemble.M
    for k in range(a, b):
        Yk, Zk = solution.knot(k)
        Yn, _ = solution.knot(k + 1)
        f = np.asarray(problem.driver(t[k], ensemble.W[:, : k + 1, :], Yk, Zk), dtype=float)
        r = Yk - Yn - f.reshape(Yk.shape) * dt + np.einsum("mdn,mn->md", Zk, ensemble.dW[:, k, :])
        mean = r.mean(axis=0)
        se = r.std(axis=0, ddof=1) / math.sqrt(M)
        out["t"].append(float(t[k]))
        out["mean"].append(mean.tolist())
        out["se"].append(se.tolist())
        out["mean_sq"].append(float(np.mean(np.sum(r * r, axis=1))))
        out["max_abs"].append(float(np.max(np.abs(r))))
        if np.any(np.abs(mean) > se_mult * se + atol):
            out["flagged"].append(k)
    return ResidualReport(**out, passes=not out["flagged"])


# --------------------------------------------------------------------------
# Bound verdicts
# --------------------------------------------------------------------------

@dataclass
class BoundVerdict:
    name: str
    constants: dict
    bound: list
    observed: list
    slack: list
    passes: bool
    failing_knots: list = field(default_factory=list)

    @property
    def max_observed(self) -> float:
        return float(max(self.observed)) if self.observed else 0.0

    def to_dict(self):
        return asdict(self) | {"max_observed": self.max_observed}


def check_y_bound(solution, C: float, T: float, t, rel_slack: float = 0.05,
                  se_mult: float = 3.0) -> BoundVerdict:
    """``max_paths |Y_k| <= phi(t_k) (1 + rel_slack) + se_mult SE_k`` at every knot.

    ``t`` holds the knot times of the solution's window.
    """
    t = np.asarray(t, dtype=float)
    bound = apriori_y_bound(C, T, t)
    bound = np.atleast_1d(bound)
    obs = np.sqrt(np.max(np.sum(solution.Y ** 2, axis=2), axis=0))
    if solution.y_se is not None:
        se = np.sqrt(np.sum(np.asarray(solution.y_se) ** 2, axis=1))
    else:
        se = np.zeros_like(obs)
    allowed = bound * (1 + rel_slack) + se_mult * se
    failing = [int(i) for i in np.nonzero(obs > allowed)[0]]
    return BoundVerdict("y_apriori", {"C": C, "T": T, "rel_slack": rel_slack, "se_mult": se_mult},
                        bound.tolist(), obs.tolist(), (allowed - obs).tolist(), not failing,
                        failing)


def check_q_bound(Y: np.ndarray, C: float, T: float, rel_slack: float = 0.05) -> BoundVerdict:
    """``max |Q_t|^2 <= C^2 e^{aT} (1+T) (1 + rel_slack)`` with ``a = 2C^2 + 2C + 1``."""
    a, bound = fbsde_q_bound(C, T)
    obs = np.max(np.sum(Y ** 2, axis=2), axis=0)
    allowed = bound * (1 + rel_slack)
    failing = [int(i) for i in np.nonzero(obs > allowed)[0]]
    K = obs.shape[0]
    return BoundVerdict("q_squared", {"C": C, "T": T, "a": a, "rel_slack": rel_slack},
                        [bound] * K, obs.tolist(), (allowed - obs).tolist(), not failing, failing)


def export_bound_curve(path, t, verdict: BoundVerdict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "bound", "max_observed"])
        for ti, b, o in zip(t, verdict.bound, verdict.observed):
            w.writerow([repr(float(ti)), repr(float(b)), repr(float(o))])


# --------------------------------------------------------------------------
# Drift of the measure change used for the a priori bound
# --------------------------------------------------------------------------

@dataclass
class DriftCheck:
    name: str
    mean_weight: float
    se: float
    passes: bool

    def to_dict(self):
        return asdict(self)


def build_b4_drift(Y: np.ndarray, Z: np.ndarray, rho: RhoSpec, ensemble: PathEnsemble,
                   null_tol: float = 1e-14):
    """``H = rho(|Y|) |Z| (Y'Z) / |Y'Z|``, zero where ``|Y'Z| < null_tol``.

    ``Y`` holds at least the knots ``0..K-1`` matching ``Z`` of shape
    ``(M, K, d, n)``.  Returns ``(H, weight)`` with ``H`` of shape ``(M, K, n)``.
    """
    Z = np.asarray(Z, dtype=float)
    K = Z.shape[1]
    Yk = np.asarray(Y, dtype=float)[:, :K, :]
    yz = np.einsum("mkd,mkdn->mkn", Yk, Z)
    norm_yz = np.sqrt(np.sum(yz * yz, axis=2, keepdims=True))
    zn = np.sqrt(_frob2(Z))[..., None]
    r = np.asarray(rho(np.sqrt(np.sum(Yk * Yk, axis=2))), dtype=float)[..., None]
    safe = np.where(norm_yz >= null_tol, norm_yz, 1.0)
    H = np.where(norm_yz >= null_tol, r * zn * yz / safe, 0.0)
    return H, stochastic_exponential(ensemble, H)


def drift_check(name: str, weight: MeasureWeight, se_mult: float = 3.0) -> DriftCheck:
    """Mean terminal weight within ``se_mult`` standard errors of 1."""
    m, se = weight.mean_terminal()
    return DriftCheck(name, m, se, abs(m - 1.0) <= se_mult * se + 1e-12)


# --------------------------------------------------------------------------
# Aggregate report
# --------------------------------------------------------------------------

@dataclass
class DiagnosticsReport:
    sup_y: float
    h2_z: float
    bmo_z: float
    M: int
    bmo_note: str = BMO_NOTE
    verdicts: list = field(default_factory=list)
    residuals: Optional[ResidualReport] = None
    drift: list = field(default_factory=list)

    @property
    def passes(self) -> bool:
        ok = all(v.passes for v in self.verdicts) and all(d.passes for d in self.drift)
        return ok

    def to_dict(self):
        return {
            "sup_y": self.sup_y,
            "h2_z": self.h2_z,
            "bmo_z": self.bmo_z,
            "paths": self.M,
            "bmo_note": self.bmo_note,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "residuals": None if self.residuals is None else self.residuals.to_dict(),
            "drift": [d.to_dict() for d in self.drift],
            "passes": self.passes,
        }
