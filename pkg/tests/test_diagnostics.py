import math

import numpy as np
import pytest

from mbsde.condexp import BasisSpec, NestedEstimator, RegressionEstimator
from mbsde.diagnostics import (build_b4_drift, check_q_bound, check_y_bound, drift_check,
                               estimate_bmo, export_bound_curve, h2_norm, residual_check,
                               sup_norm)
from mbsde.picard import SolutionField
from mbsde.problem import BsdeProblem, RhoSpec, apriori_y_bound, fbsde_q_bound
from mbsde.scenarios import build_problem
from mbsde.simulate import TimeGrid, sample_brownian


@pytest.fixture(scope="module")
def ens():
    return sample_brownian(TimeGrid(1.0, 16), 20_000, 1, seed=31)


@pytest.fixture(scope="module")
def reg(ens):
    return RegressionEstimator(BasisSpec(degree=4)).bind(ens)


def test_norms_on_constant_fields():
    Y = np.zeros((10, 5, 2))
    Y[3, 2] = [3.0, 4.0]
    assert sup_norm(Y) == 5.0
    Z = np.ones((10, 4, 2, 3))
    assert h2_norm(Z, 0.25) == pytest.approx(math.sqrt(6.0))


def test_bmo_of_zero_and_constant_integrands(reg, ens):
    assert estimate_bmo(np.zeros((ens.M, ens.N, 1, 1)), ens.grid.dt, reg) == 0.0
    z = np.array([[0.3, -0.4]])
    Z = np.broadcast_to(z, (ens.M, ens.N, 1, 2))
    assert estimate_bmo(Z, ens.grid.dt, reg) == pytest.approx(math.sqrt(1.0) * 0.5, rel=1e-12)


def test_bmo_of_the_sine_integrand(reg, ens):
    # Z_s = cos(W_s) e^{-(T-s)/2}, so |Z_s|^2 <= e^{-(T-s)} and the tail integral <= 1 - e^{-T}
    t = ens.grid.t[:-1]
    Z = (np.cos(ens.W[:, :-1, 0]) * np.exp(-(1.0 - t) / 2))[:, :, None, None]
    est = estimate_bmo(Z, ens.grid.dt, reg)
    right_sum = math.sqrt(np.sum(np.exp(-(1.0 - t))) * ens.grid.dt)
    assert est <= right_sum + 0.01
    assert est <= math.sqrt(1 - math.exp(-1.0)) + 0.03
    assert est > 0.5


def test_bmo_nested_constant(ens):
    nest = NestedEstimator(branching=50, seed=0)
    est = estimate_bmo(lambda j, flat: np.full((flat.shape[0], 1, 1), 2.0), ens.grid.dt, nest,
                       ensemble=ens, paths=[0, 1], stop=ens.N, knots=[0, 8])
    assert est == pytest.approx(2.0, rel=1e-12)


def _linear_solution(ens, b=0.3, c=0.7):
    Y = np.broadcast_to((c + b * (1.0 - ens.grid.t))[None, :, None], (ens.M, ens.N + 1, 1)).copy()
    Z = np.zeros((ens.M, ens.N, 1, 1))
    p = BsdeProblem(1, 1, 1.0, lambda paths: np.full((paths.shape[0], 1), c),
                    lambda t, pre, y, z: np.full_like(y, b))
    return p, SolutionField(Y, Z, (0, ens.N))


def test_residuals_vanish_on_the_exact_linear_solution(ens):
    p, sol = _linear_solution(ens)
    rep = residual_check(p, sol, ens)
    assert rep.passes
    assert max(rep.max_abs) < 1e-12


def test_residuals_flag_a_corrupted_knot(ens):
    p, sol = _linear_solution(ens)
    sol.Y[:, 7] += 0.1
    rep = residual_check(p, sol, ens)
    assert not rep.passes
    assert rep.flagged == [6, 7]
    assert rep.mean[7][0] == pytest.approx(0.1, abs=1e-12)
    assert rep.mean[6][0] == pytest.approx(-0.1, abs=1e-12)


def test_y_bound_passes_for_bounded_zero_driver_and_fails_when_scaled(ens):
    C = 1.0
    Y = np.sin(ens.W)[:, :, :1] * 0.9
    sol = SolutionField(Y, np.zeros((ens.M, ens.N, 1, 1)), (0, ens.N),
                        y_se=np.full((ens.N + 1, 1), 1e-3))
    ok = check_y_bound(sol, C, 1.0, ens.grid.t)
    assert ok.passes
    assert ok.bound[-1] == pytest.approx(2.0)
    bad = check_y_bound(SolutionField(20 * Y, sol.Z, sol.window, y_se=sol.y_se), C, 1.0,
                        ens.grid.t)
    assert not bad.passes
    # Y_0 = 0 on every path; the violation shows from the first knots on
    assert 0 not in bad.failing_knots and min(bad.failing_knots) <= 2
    phi = apriori_y_bound(C, 1.0, ens.grid.t)
    observed = 20 * np.max(np.abs(Y[:, :, 0]), axis=0)
    assert bad.failing_knots == [k for k in range(ens.N + 1)
                                 if observed[k] > 1.05 * phi[k] + 3e-3]


def test_q_bound(ens):
    a, b = fbsde_q_bound(1.0, 0.5)
    Y = np.full((ens.M, 3, 2), math.sqrt(b / 2) * 0.99)
    assert check_q_bound(Y, 1.0, 0.5).passes
    assert not check_q_bound(2 * Y, 1.0, 0.5).passes
    # C = 0 forces Q = 0
    assert check_q_bound(np.zeros((5, 3, 1)), 0.0, 0.5).passes
    assert not check_q_bound(np.full((5, 3, 1), 1e-3), 0.0, 0.5).passes


def test_b4_drift_of_zero_integrand(ens):
    Y = np.ones((ens.M, ens.N + 1, 1))
    H, w = build_b4_drift(Y, np.zeros((ens.M, ens.N, 1, 1)), RhoSpec((0.5,)), ens)
    assert not H.any()
    np.testing.assert_array_equal(w.weights, 1.0)


def test_b4_drift_in_one_dimension(ens):
    rng = np.random.default_rng(2)
    Y = rng.normal(size=(ens.M, ens.N + 1, 1))
    Z = rng.normal(size=(ens.M, ens.N, 1, 1))
    rho = RhoSpec((0.2, 0.1))
    H, _ = build_b4_drift(Y, Z, rho, ens)
    expect = rho(np.abs(Y[:, :-1, 0])) * np.abs(Z[:, :, 0, 0])
    np.testing.assert_allclose(np.abs(H[:, :, 0]), expect, rtol=1e-14)
    np.testing.assert_array_equal(np.sign(H[:, :, 0]), np.sign(Y[:, :-1, 0] * Z[:, :, 0, 0]))


def test_b4_weight_of_a_bounded_field_is_a_martingale():
    ens = sample_brownian(TimeGrid(1.0, 16), 100_000, 2, seed=4)
    Y = np.stack([np.sin(ens.W[:, :, 0]), np.cos(ens.W[:, :, 1])], axis=2)
    t = ens.grid.t[:-1]
    Z = np.zeros((ens.M, ens.N, 2, 2))
    Z[:, :, 0, 0] = np.cos(ens.W[:, :-1, 0]) * np.exp(-(1 - t) / 2)
    Z[:, :, 1, 1] = -np.sin(ens.W[:, :-1, 1]) * np.exp(-(1 - t) / 2)
    _, w = build_b4_drift(Y, Z, RhoSpec((0.3,)), ens)
    assert drift_check("b4", w).passes


def test_bound_curve_export(tmp_path, ens):
    p = build_problem("zero-driver")
    assert p.terminal_bound is not None
    Y = np.zeros((4, 3, 1))
    v = check_y_bound(SolutionField(Y, np.zeros((4, 2, 1, 1)), (0, 2)), 1.0, 1.0, [0.0, 0.5, 1.0])
    export_bound_curve(tmp_path / "b.csv", [0.0, 0.5, 1.0], v)
    rows = (tmp_path / "b.csv").read_text().splitlines()
    assert rows[0] == "t,bound,max_observed" and len(rows) == 4
