"""Built-in problems with their reference values.

Each scenario builds a :class:`~mbsde.problem.BsdeProblem` from numeric
parameters and knows how to produce a reference value for ``Y_0``: a closed
form, a plain Monte Carlo average on the run's own ensemble, or nothing (when
the only available check is agreement between two solver routes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import expm

from .condexp import BasisSpec
from .problem import (BsdeProblem, Generic, RhoSpec, markovian_problem, projectable_problem,
                      subquadratic_problem)
from .simulate import PathEnsemble

__all__ = ["Scenario", "Reference", "SCENARIOS", "get_scenario", "build_problem"]


@dataclass
class Reference:
    """Reference ``Y_0`` with its own standard error (zero for closed forms)."""

    y0: np.ndarray
    se: np.ndarray
    kind: str

    def to_dict(self):
        return {"y0": np.asarray(self.y0).tolist(), "se": np.asarray(self.se).tolist(),
                "kind": self.kind}


@dataclass(frozen=True)
class Scenario:
    name: str
    description: str
    builder: Callable[..., BsdeProblem]
    params: dict
    route: str
    policy: str = "adaptive"
    basis: BasisSpec = field(default_factory=BasisSpec)
    reference: Optional[Callable] = None
    se_mult: float = 3.0
    abs_tol: float = 0.0
    z_exact: Optional[Callable] = None
    exact_y0: Optional[Callable] = None

    def build(self, **overrides) -> BsdeProblem:
        unknown = set(overrides) - set(self.params)
        if unknown:
            raise ValueError(f"scenario {self.name!r} has no parameters {sorted(unknown)}")
        return self.builder(**(self.params | overrides))

    def merged(self, overrides: dict) -> dict:
        return self.params | overrides

    def reference_value(self, ensemble: PathEnsemble, **overrides) -> Optional[Reference]:
        if self.reference is None:
            return None
        return self.reference(ensemble, **self.merged(overrides))

    def exact_value(self, **overrides) -> Optional[np.ndarray]:
        """Deterministic ``Y_0`` (no Monte Carlo error), when one is known."""
        if self.exact_y0 is None:
            return None
        return np.asarray(self.exact_y0(**self.merged(overrides)), dtype=float)


def _zero(t, prefix, y, z):
    return np.zeros_like(y)


def _se(x):
    return x.std(axis=0, ddof=1) / math.sqrt(x.shape[0])


# --------------------------------------------------------------------------
# zero-driver, sine-terminal
# --------------------------------------------------------------------------

def _zero_driver(T=1.0):
    def terminal(paths):
        w = paths[:, -1, :]
        return np.stack([np.sin(w[:, 0]), np.cos(w[:, 1])], axis=1)

    return BsdeProblem(2, 2, T, terminal, _zero, terminal_bound=math.sqrt(2.0), name="zero-driver")


def _zero_driver_ref(ensemble, T=1.0):
    return Reference(np.array([0.0, math.exp(-T / 2)]), np.zeros(2), "closed-form")


def _zero_driver_exact(T=1.0):
    return np.array([0.0, math.exp(-T / 2)])


def _zero_driver_z(t, x, T=1.0):
    s = math.exp(-(T - t) / 2)
    Z = np.zeros((x.shape[0], 2, 2))
    Z[:, 0, 0] = np.cos(x[:, 0]) * s
    Z[:, 1, 1] = -np.sin(x[:, 1]) * s
    return Z


def _sine_terminal(T=1.0, theta=0.5):
    def terminal(paths):
        return np.sin(paths[:, -1, :1] + theta)

    return BsdeProblem(1, 1, T, terminal, _zero, terminal_bound=1.0, name="sine-terminal")


def _sine_terminal_ref(ensemble, T=1.0, theta=0.5):
    return Reference(np.array([math.sin(theta) * math.exp(-T / 2)]), np.zeros(1), "closed-form")


def _sine_terminal_z(t, x, T=1.0, theta=0.5):
    return (np.cos(x[:, :1] + theta) * math.exp(-(T - t) / 2))[:, :, None]


# --------------------------------------------------------------------------
# linear-vector
# --------------------------------------------------------------------------

_LIN_A = ((-0.5, 0.3), (0.2, -0.4))
_LIN_B = (0.1, -0.2)


def _linear_vector(T=1.0, A=_LIN_A, b=_LIN_B):
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)

    def terminal(paths):
        w = paths[:, -1, 0]
        return np.stack([np.sin(w), np.cos(w)], axis=1)

    def F(t, prefix, y, z):
        return y @ A.T + b

    norm_a = float(np.linalg.norm(A, 2))
    C = max(1.0, norm_a, float(np.linalg.norm(b)))
    return subquadratic_problem(F, _zero, terminal, 2, 1, T, C=C, eps=0.5,
                                rho=RhoSpec.constant(norm_a), name="linear-vector")


def _linear_vector_ref(ensemble, T=1.0, A=_LIN_A, b=_LIN_B):
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    mean_xi = np.array([0.0, math.exp(-T / 2)])
    # int_0^T e^{As} b ds = A^{-1} (e^{AT} - I) b via the augmented exponential
    aug = np.zeros((3, 3))
    aug[:2, :2] = A * T
    aug[:2, 2] = b * T
    E = expm(aug)
    y0 = E[:2, :2] @ mean_xi + E[:2, 2]
    return Reference(y0, np.zeros(2), "closed-form")


# --------------------------------------------------------------------------
# scalar-quadratic
# --------------------------------------------------------------------------

def _scalar_quadratic(T=0.5, gamma=0.5):
    def terminal(paths):
        return np.sin(paths[:, -1, :1])

    def P(t, prefix, u, v):
        return np.zeros((len(u), 1))

    def Q(t, prefix, u, v):
        return np.zeros(len(u))

    def R(t, prefix, u, v):
        return 0.5 * gamma * v

    return projectable_problem([1.0], P, Q, R, terminal, 1, 1, T, C=1.0,
                               rho=RhoSpec.constant(abs(gamma) / 2), terminal_bound=1.0,
                               name="scalar-quadratic")


def _scalar_quadratic_ref(ensemble, T=0.5, gamma=0.5):
    xi = np.sin(ensemble.W[:, -1, 0])
    e = np.exp(gamma * xi)
    m = e.mean()
    return Reference(np.array([math.log(m) / gamma]),
                     np.array([_se(e) / (abs(gamma) * m)]), "cole-hopf-mc")


def _scalar_quadratic_exact(T=0.5, gamma=0.5, nodes=120):
    # Gauss-Hermite quadrature of E exp(gamma sin(sqrt(T) G)), G standard normal
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    m = float(np.exp(gamma * np.sin(math.sqrt(T) * x)) @ w) / math.sqrt(2 * math.pi)
    return np.array([math.log(m) / gamma])


# --------------------------------------------------------------------------
# projectable-composite
# --------------------------------------------------------------------------

def _projectable_composite(T=1.0, c_p=0.3, q0=0.4, r0=0.25):
    def terminal(paths):
        w = paths[:, -1, :]
        return 0.5 * np.stack([np.sin(w[:, 0]), np.cos(w[:, 1])], axis=1)

    def P(t, prefix, u, v):
        return c_p * np.stack([np.cos(u), np.sin(u)], axis=1)

    def Q(t, prefix, u, v):
        return q0 * np.sin(u)

    def R(t, prefix, u, v):
        return r0 * v

    C = max(c_p, q0, 1.0)
    return projectable_problem([1.0, 1.0], P, Q, R, terminal, 2, 2, T, C=C,
                               rho=RhoSpec.constant(r0), terminal_bound=math.sqrt(0.5),
                               name="projectable-composite")


# --------------------------------------------------------------------------
# subquadratic-power
# --------------------------------------------------------------------------

def _subquadratic_power(T=1.0, C=0.5, eps=0.9, lam=0.05, beta=(0.3, -0.2), kappa=0.0125,
                        rho=0.05, amp=0.5):
    beta = np.asarray(beta, dtype=float)
    # the direction the |z|-dependent factor pushes along, one entry per Brownian coordinate
    unit = np.array([1.0])

    def terminal(paths):
        w = paths[:, -1, 0]
        return amp * np.stack([np.sin(w), np.cos(w)], axis=1)

    def F(t, prefix, y, z):
        return -lam * y + beta

    def G(t, prefix, y, z):
        nz2 = np.sum(z * z, axis=(1, 2))
        scale = kappa * nz2 / (1.0 + nz2) ** ((1.0 + eps) / 2.0)
        return np.einsum("mdn,n->md", z, unit) * scale[:, None]

    return subquadratic_problem(F, G, terminal, 2, 1, T, C=C, eps=eps,
                                rho=RhoSpec.constant(rho), name="subquadratic-power")


# --------------------------------------------------------------------------
# Markovian: decoupled, drifted, damped heat
# --------------------------------------------------------------------------

def _decoupled_fbsde(T=0.5, lam=0.5, beta=(0.2, -0.1)):
    beta = np.asarray(beta, dtype=float)

    def F(t, x, y, z):
        return -lam * y + beta

    def G(t, x, y, z):
        return np.zeros((x.shape[0], 1))

    def h(x):
        return np.stack([np.sin(x[:, 0]), np.cos(x[:, 0])], axis=1)

    C = 1.0 + float(np.linalg.norm(beta)) + lam
    return markovian_problem(F, G, h, 2, 1, T, lipschitz_constant=max(1.0, lam),
                             growth_constant=C, rho=RhoSpec.constant(0.0), name="decoupled-fbsde")


def _decoupled_ref(ensemble, T=0.5, lam=0.5, beta=(0.2, -0.1)):
    beta = np.asarray(beta, dtype=float)
    # u(0, 0) = e^{-(lam + 1/2) T} h(0) + beta (1 - e^{-lam T}) / lam
    h0 = np.array([0.0, 1.0])
    y0 = math.exp(-(lam + 0.5) * T) * h0 + beta * (1 - math.exp(-lam * T)) / lam
    return Reference(y0, np.zeros(2), "closed-form")


def _drifted_fbsde(T=0.5, g=0.8, coupling=0.0):
    def F(t, x, y, z):
        return np.zeros_like(y)

    def G(t, x, y, z):
        return g + coupling * np.sin(y[:, :1])

    def h(x):
        return np.sin(x[:, :1])

    return markovian_problem(F, G, h, 1, 1, T, lipschitz_constant=1.0 + abs(coupling),
                             growth_constant=1.0, rho=RhoSpec.constant(abs(g) + abs(coupling)),
                             name="drifted-fbsde")


def _drifted_ref(ensemble, T=0.5, g=0.8, coupling=0.0):
    if coupling != 0.0:
        return None
    return Reference(np.array([math.sin(g * T) * math.exp(-T / 2)]), np.zeros(1), "closed-form")


def _damped_heat(T=0.25):
    def F(t, x, y, z):
        return -y

    def G(t, x, y, z):
        return np.zeros((x.shape[0], 1))

    def h(x):
        return np.sin(x[:, :1])

    return markovian_problem(F, G, h, 1, 1, T, lipschitz_constant=1.0, growth_constant=1.0,
                             rho=RhoSpec.constant(0.0), name="damped-heat")


def _damped_ref(ensemble, T=0.25):
    return Reference(np.zeros(1), np.zeros(1), "closed-form")


def damped_heat_exact(t, x, T=0.25):
    """``sin(x) e^{-1.5 (T - t)}``."""
    return np.sin(x) * math.exp(-1.5 * (T - t))


SCENARIOS: dict[str, Scenario] = {
    s.name: s for s in [
        Scenario("zero-driver", "f = 0, xi = (sin W1_T, cos W2_T)", _zero_driver, {"T": 1.0},
                 "picard", "adaptive",
                 BasisSpec(degree=8, slope_degree=6, curvature_degree=4),
                 _zero_driver_ref, z_exact=_zero_driver_z, exact_y0=_zero_driver_exact),
        Scenario("sine-terminal", "f = 0, xi = sin(W_T + theta)", _sine_terminal,
                 {"T": 1.0, "theta": 0.5}, "picard", "adaptive", BasisSpec(degree=8),
                 _sine_terminal_ref, z_exact=_sine_terminal_z),
        Scenario("linear-vector", "f = A y + b, xi = (sin W_T, cos W_T)", _linear_vector,
                 {"T": 1.0, "A": _LIN_A, "b": _LIN_B}, "picard", "adaptive", BasisSpec(degree=8),
                 _linear_vector_ref, abs_tol=0.005),
        Scenario("scalar-quadratic", "f = (gamma/2) |z|^2, xi = sin W_T", _scalar_quadratic,
                 {"T": 0.5, "gamma": 0.5}, "picard", "adaptive", BasisSpec(degree=8),
                 _scalar_quadratic_ref, abs_tol=0.02, exact_y0=_scalar_quadratic_exact),
        Scenario("projectable-composite", "a = (1,1), P trigonometric, Q = q0 sin u, R = r0 v",
                 _projectable_composite, {"T": 1.0, "c_p": 0.3, "q0": 0.4, "r0": 0.25},
                 "project", "adaptive", BasisSpec(degree=6, slope_degree=4, curvature_degree=2)),
        Scenario("subquadratic-power", "f = -lam y + beta + kappa z |z|^2 / (1+|z|^2)^((1+eps)/2)",
                 _subquadratic_power,
                 {"T": 1.0, "C": 0.5, "eps": 0.9, "lam": 0.05, "beta": (0.3, -0.2),
                  "kappa": 0.0125, "rho": 0.05, "amp": 0.5},
                 "picard", "global", BasisSpec(degree=8)),
        Scenario("decoupled-fbsde", "F = -lam y + beta, G = 0, h = (sin, cos)", _decoupled_fbsde,
                 {"T": 0.5, "lam": 0.5, "beta": (0.2, -0.1)}, "markovian", "adaptive",
                 BasisSpec(degree=8), _decoupled_ref, abs_tol=0.005),
        Scenario("drifted-fbsde", "F = 0, G = g + c sin(y), h = sin", _drifted_fbsde,
                 {"T": 0.5, "g": 0.8, "coupling": 0.0}, "markovian", "adaptive",
                 BasisSpec(degree=8), _drifted_ref, abs_tol=0.005),
        Scenario("damped-heat", "F = -y, G = 0, h = sin", _damped_heat, {"T": 0.25},
                 "markovian", "adaptive", BasisSpec(degree=8), _damped_ref, abs_tol=0.005),
    ]
}


def get_scenario(name: str) -> Scenario:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; known: {', '.join(SCENARIOS)}") from None


def build_problem(name: str, **params) -> BsdeProblem:
    return get_scenario(name).build(**params)
