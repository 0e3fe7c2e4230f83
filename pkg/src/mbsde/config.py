"""Run configuration: a single YAML (or JSON) document with a fixed set of keys.

Example::

    problem:
      scenario: scalar-quadratic     # or  family: subquadratic-power
      params: {gamma: 0.5}
    grid: {T: 0.5, N: 64}
    ensemble: {M: 100000, seed: 7}
    route: auto                      # picard | project | markovian | auto
    estimator: {kind: regression, degree: 8}
    tolerances: {picard_tol: 1.0e-6, max_iter: 50}
    output: runs/quadratic

Every mapping is checked against its field list; unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .condexp import BasisSpec, NestedEstimator, RegressionEstimator
from .scenarios import SCENARIOS, get_scenario

__all__ = [
    "ConfigError",
    "ProblemRef",
    "GridConfig",
    "EnsembleConfig",
    "EstimatorConfig",
    "Tolerances",
    "RunConfig",
    "load_config",
    "parse_config",
    "FAMILIES",
    "ROUTES",
    "POLICIES",
]

ROUTES = ("auto", "picard", "project", "markovian")
POLICIES = ("global", "adaptive", "fixed", "running")

# inline driver families and the scenario whose builder realises each
FAMILIES = {
    "linear": "linear-vector",
    "scalar-quadratic": "scalar-quadratic",
    "projectable-composite": "projectable-composite",
    "subquadratic-power": "subquadratic-power",
}


class ConfigError(ValueError):
    """The configuration does not parse or is inconsistent."""


def _build(cls, data: Any, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {unknown}; allowed: {sorted(names)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _positive_int(value, where):
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"{where} must be a positive integer, got {value!r}")


def _positive_float(value, where, allow_zero=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(f"{where} must be a finite number, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(f"{where} must be {'>=' if allow_zero else '>'} 0, got {value!r}")


@dataclass
class ProblemRef:
    scenario: Optional[str] = None
    family: Optional[str] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.scenario is None) == (self.family is None):
            raise ConfigError("problem: give exactly one of 'scenario' or 'family'")
        if self.scenario is not None and self.scenario not in SCENARIOS:
            raise ConfigError(f"problem.scenario: unknown scenario {self.scenario!r}; "
                              f"known: {', '.join(SCENARIOS)}")
        if self.family is not None and self.family not in FAMILIES:
            raise ConfigError(f"problem.family: unknown family {self.family!r}; "
                              f"known: {', '.join(FAMILIES)}")
        if not isinstance(self.params, dict):
            raise ConfigError("problem.params must be a mapping")
        allowed = get_scenario(self.scenario_name).params
        unknown = sorted(set(self.params) - set(allowed))
        if unknown:
            raise ConfigError(f"problem.params: unknown parameter(s) {unknown} for "
                              f"{self.scenario_name!r}; allowed: {sorted(allowed)}")

    @property
    def scenario_name(self) -> str:
        return self.scenario if self.scenario is not None else FAMILIES[self.family]


@dataclass
class GridConfig:
    N: int = 64
    T: Optional[float] = None

    def __post_init__(self):
        _positive_int(self.N, "grid.N")
        if self.T is not None:
            _positive_float(self.T, "grid.T")


@dataclass
class EnsembleConfig:
    M: int = 10_000
    seed: int = 0

    def __post_init__(self):
        _positive_int(self.M, "ensemble.M")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"ensemble.seed must be a non-negative integer, got {self.seed!r}")


@dataclass
class EstimatorConfig:
    kind: str = "regression"
    family: Optional[str] = None
    degree: Optional[int] = None
    slope_degree: Optional[int] = None
    curvature_degree: Optional[int] = None
    cells: Optional[int] = None
    lags: Optional[int] = None
    rcond: float = 1e-10
    safety_factor: float = 10.0
    branching: int = 1000
    budget: float = 5e7
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("regression", "nested"):
            raise ConfigError(f"estimator.kind must be 'regression' or 'nested', got {self.kind!r}")
        _positive_float(self.rcond, "estimator.rcond")
        _positive_float(self.safety_factor, "estimator.safety_factor")
        _positive_int(self.branching, "estimator.branching")
        _positive_float(self.budget, "estimator.budget")

    def basis(self, default: BasisSpec) -> BasisSpec:
        """The scenario's basis with every field set here replacing its counterpart."""
        keys = ("family", "degree", "slope_degree", "curvature_degree", "cells", "lags")
        changes = {k: getattr(self, k) for k in keys if getattr(self, k) is not None}
        try:
            return dataclasses.replace(default, **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"estimator: {exc}") from None

    def regression(self, default: BasisSpec) -> RegressionEstimator:
        return RegressionEstimator(self.basis(default), self.safety_factor, self.rcond)

    def nested(self) -> NestedEstimator:
        return NestedEstimator(self.branching, self.seed, self.budget)


@dataclass
class Tolerances:
    picard_tol: float = 1e-6
    max_iter: int = 50
    policy: Optional[str] = None
    steps_per_window: Optional[int] = None
    ratio_cap: float = 0.6
    outer_tol: float = 1e-4
    max_outer: int = 30
    se_mult: float = 3.0
    bound_slack: float = 0.05
    oracle_tol: Optional[float] = None
    nested_paths: int = 20

    def __post_init__(self):
        _positive_float(self.picard_tol, "tolerances.picard_tol")
        _positive_int(self.max_iter, "tolerances.max_iter")
        if self.policy is not None and self.policy not in POLICIES:
            raise ConfigError(f"tolerances.policy must be one of {POLICIES}, got {self.policy!r}")
        if self.steps_per_window is not None:
            _positive_int(self.steps_per_window, "tolerances.steps_per_window")
        _positive_float(self.ratio_cap, "tolerances.ratio_cap")
        _positive_float(self.outer_tol, "tolerances.outer_tol")
        _positive_int(self.max_outer, "tolerances.max_outer")
        _positive_float(self.se_mult, "tolerances.se_mult", allow_zero=True)
        _positive_float(self.bound_slack, "tolerances.bound_slack", allow_zero=True)
        if self.oracle_tol is not None:
            _positive_float(self.oracle_tol, "tolerances.oracle_tol", allow_zero=True)
        _positive_int(self.nested_paths, "tolerances.nested_paths")


@dataclass
class RunConfig:
    problem: ProblemRef
    grid: GridConfig = field(default_factory=GridConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    route: str = "auto"
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    tolerances: Tolerances = field(default_factory=Tolerances)
    output: str = "out"

    def __post_init__(self):
        if self.route not in ROUTES:
            raise ConfigError(f"route must be one of {ROUTES}, got {self.route!r}")
        if not isinstance(self.output, str) or not self.output:
            raise ConfigError("output must be a non-empty path string")
        T = self.problem.params.get("T")
        if self.grid.T is not None and T is not None and float(T) != float(self.grid.T):
            raise ConfigError(f"grid.T={self.grid.T} contradicts problem.params.T={T}")

    @property
    def scenario(self):
        return get_scenario(self.problem.scenario_name)

    @property
    def params(self) -> dict:
        p = dict(self.problem.params)
        if self.grid.T is not None:
            p["T"] = float(self.grid.T)
        return p

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        """Copy with dotted overrides, e.g. ``replace(**{"ensemble.seed": 3})``."""
        data = self.to_dict()
        for key, value in changes.items():
            node = data
            parts = key.split(".")
            for p in parts[:-1]:
                node = node[p]
            node[parts[-1]] = value
        return parse_config(data)


def parse_config(data: Any) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping at the top level")
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {unknown}; allowed: {sorted(names)}")
    if "problem" not in data:
        raise ConfigError("missing required field 'problem'")
    parts = {
        "problem": _build(ProblemRef, data["problem"], "problem"),
        "grid": _build(GridConfig, data.get("grid"), "grid"),
        "ensemble": _build(EnsembleConfig, data.get("ensemble"), "ensemble"),
        "estimator": _build(EstimatorConfig, data.get("estimator"), "estimator"),
        "tolerances": _build(Tolerances, data.get("tolerances"), "tolerances"),
    }
    for key in ("route", "output"):
        if key in data:
            parts[key] = data[key]
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    """Parse a YAML or JSON file (JSON when the suffix is ``.json``)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    return parse_config(data)
