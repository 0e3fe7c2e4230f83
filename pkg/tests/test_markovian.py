import math

import numpy as np
import pytest

from mbsde.condexp import BasisSpec, RegressionEstimator
from mbsde.markovian import (PdeGrid, central_mask, export_field, fbsde_to_bsde, gradient_check,
                             lipschitz_certificate, pde_crosscheck, pde_solve,
                             solve_fbsde_decoupling)
from mbsde.problem import markovian_problem
from mbsde.scenarios import build_problem, damped_heat_exact
from mbsde.simulate import TimeGrid, sample_brownian


def _zero_G(t, x, y, z):
    return np.zeros((x.shape[0], 1))


def _sin_h(x):
    return np.sin(x[:, :1])


@pytest.fixture(scope="module")
def ens():
    return sample_brownian(TimeGrid(0.5, 16), 20_000, 1, seed=12)


EST = RegressionEstimator(BasisSpec(degree=6))


def test_zero_forward_drift_decouples(ens):
    p = build_problem("decoupled-fbsde")
    res = solve_fbsde_decoupling(p, ens, estimator=EST)
    assert res.converged and res.outer_iterations == 1
    np.testing.assert_array_equal(res.forward, ens.W)
    bsde, frac = fbsde_to_bsde(res.field, ens)
    # re-evaluating the fitted polynomials reproduces the solver's values up to rounding
    np.testing.assert_allclose(bsde.Y, res.solution.Y, rtol=0, atol=1e-12)
    assert frac == 0.0
    y0 = res.solution.Y[:, 0].mean(axis=0)
    # u(0, 0) = e^{-(lam + 1/2) T} h(0) + beta (1 - e^{-lam T}) / lam at lam = T = 0.5
    exact = (math.exp(-0.5) * np.array([0.0, 1.0])
             + np.array([0.2, -0.1]) * (1 - math.exp(-0.25)) / 0.5)
    assert np.all(np.abs(y0 - exact) <= 3 * res.solution.y_se[0] + 2 * ens.grid.dt)


def test_constant_forward_drift_shifts_the_sine(ens):
    g, T = 0.8, 0.5
    res = solve_fbsde_decoupling(build_problem("drifted-fbsde", g=g), ens, estimator=EST)
    assert res.converged
    np.testing.assert_allclose(res.forward[:, -1, 0], ens.W[:, -1, 0] + g * T, atol=1e-12)
    exact = math.sin(g * T) * math.exp(-T / 2)
    # the shifted heat-kernel value also by plain MC on the same paths
    plain = np.sin(ens.W[:, -1, 0] + g * T)
    assert abs(plain.mean() - exact) <= 3 * plain.std() / math.sqrt(ens.M)
    assert abs(res.solution.Y[:, 0, 0].mean() - exact) <= 3 * res.solution.y_se[0, 0] + 0.01
    bsde, _ = fbsde_to_bsde(res.field, ens)
    assert abs(bsde.Y[:, 0, 0].mean() - exact) <= 0.01


def test_linear_damping_keeps_the_symmetric_start_at_zero(ens):
    p = markovian_problem(lambda t, x, y, z: -y, _zero_G, _sin_h, 1, 1, 0.5)
    res = solve_fbsde_decoupling(p, ens, estimator=EST)
    assert abs(res.solution.Y[:, 0, 0].mean()) <= 3 * res.solution.y_se[0, 0]


def test_gradient_check_on_the_heat_field(ens):
    p = markovian_problem(lambda t, x, y, z: np.zeros_like(y), _zero_G, _sin_h, 1, 1, 0.5)
    res = solve_fbsde_decoupling(p, ens, estimator=EST)
    out = gradient_check(res.field, ens)
    assert out["mean_gap"] < 0.02
    k = 8
    x = ens.W[:, k]
    mask = central_mask(x, 0.9)
    truth = np.cos(x[mask, 0]) * math.exp(-(0.5 - ens.grid.t[k]) / 2)
    assert np.max(np.abs(res.field.r(k, x[mask])[:, 0, 0] - truth)) < 0.05


def test_central_mask_keeps_the_requested_mass():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(10_000, 2))
    m = central_mask(x, 0.9)
    assert abs(m.mean() - 0.9) < 1e-3
    r = np.sum(((x - x.mean(axis=0)) / x.std(axis=0)) ** 2, axis=1)
    assert r[m].max() <= r[~m].min()


@pytest.mark.parametrize("damped", [False, True])
def test_pde_heat_eigenfunction(damped):
    T = 0.25
    F = (lambda t, x, y, z: -y) if damped else (lambda t, x, y, z: np.zeros_like(y))
    p = markovian_problem(F, _zero_G, _sin_h, 1, 1, T)
    res = pde_solve(p, PdeGrid(4.0, 0.01), N=4)
    assert res.u.shape[0] == 5
    rate = 1.5 if damped else 0.5
    # the linearly extrapolated edge leaks inward; stay a diffusion length away from it
    inner = np.abs(res.x[:, 0]) <= 2.0
    for k, t in enumerate(res.t):
        truth = np.sin(res.x[inner, 0]) * math.exp(-rate * (T - t))
        assert np.max(np.abs(res.u[k, inner, 0] - truth)) <= 1e-3


def test_pde_constant_terminal_is_exact():
    p = markovian_problem(lambda t, x, y, z: np.zeros_like(y), _zero_G,
                          lambda x: np.full((x.shape[0], 1), 0.3), 1, 1, 0.1)
    res = pde_solve(p, PdeGrid(2.0, 0.05), N=2)
    np.testing.assert_array_equal(res.u, 0.3)


def test_pde_two_dimensional_heat():
    T = 0.1

    def h(x):
        return (np.sin(x[:, 0]) * np.cos(x[:, 1]))[:, None]

    p = markovian_problem(lambda t, x, y, z: np.zeros_like(y),
                          lambda t, x, y, z: np.zeros((x.shape[0], 2)), h, 1, 2, T)
    res = pde_solve(p, PdeGrid(3.0, 0.05, n=2), N=2)
    inner = np.all(np.abs(res.x) <= 2.0, axis=1)
    truth = h(res.x[inner])[:, 0] * math.exp(-T)
    assert np.max(np.abs(res.u[0, inner, 0] - truth)) <= 2e-3


def test_pde_rejects_unstable_substeps():
    p = build_problem("damped-heat")
    with pytest.raises(ValueError, match="stability"):
        pde_solve(p, PdeGrid(2.0, 0.01, substeps=1), N=4)


def test_pde_crosscheck_on_damped_heat():
    # the allowance has no term for the O(dt) bias of the Monte Carlo scheme, so N must be fine
    ens = sample_brownian(TimeGrid(0.25, 64), 20_000, 1, seed=5)
    p = build_problem("damped-heat")
    res = solve_fbsde_decoupling(p, ens, estimator=EST)
    fine, rep = pde_crosscheck(p, res.field, ens, PdeGrid(4.0, 0.02))
    assert rep["passes"], rep
    k = 32
    truth = damped_heat_exact(ens.grid.t[k], fine.x[:, 0])
    assert np.max(np.abs(fine.u[k, :, 0] - truth)[np.abs(fine.x[:, 0]) < 3]) < 1e-3


def test_lipschitz_constants():
    p = markovian_problem(lambda t, x, y, z: y, _zero_G, _sin_h, 1, 1, 1.0)
    out = lipschitz_certificate(p, samples=4000)
    assert 0.95 <= out["F"] <= 1.0 + 1e-9
    assert 0.95 <= out["h"] <= 1.0 + 1e-9
    assert out["at_zero"] <= 1.0 + 1e-12
    assert out["passes"] is None

    p = markovian_problem(lambda t, x, y, z: 2 * y + np.sin(x[:, :1]), _zero_G, _sin_h, 1, 1, 1.0,
                          lipschitz_constant=2.0)
    out = lipschitz_certificate(p, samples=10_000)
    assert 1.8 <= out["F"] <= 2.0 + 1e-9
    assert out["passes"]


def test_field_export(tmp_path, ens):
    p = build_problem("damped-heat", T=0.5)
    res = solve_fbsde_decoupling(p, ens, estimator=RegressionEstimator(BasisSpec(degree=3)))
    export_field(tmp_path / "f.csv", res.field)
    rows = (tmp_path / "f.csv").read_text().splitlines()
    assert rows[0] == "knot,basis_index,coefficient,coordinate,block"
    assert len(rows) > ens.N
