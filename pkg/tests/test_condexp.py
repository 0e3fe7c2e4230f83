import math

import numpy as np
import pytest

from mbsde.condexp import (BasisSpec, NestedBudgetError, NestedEstimator, RegressionEstimator,
                           condexp_nested, condexp_regress, export_coefficients, extract_z,
                           weighted_condexp)
from mbsde.markovian import central_mask
from mbsde.simulate import TimeGrid, sample_brownian, stochastic_exponential


@pytest.fixture(scope="module")
def ens():
    return sample_brownian(TimeGrid(1.0, 8), 40_000, 2, seed=21)


@pytest.fixture(scope="module")
def reg(ens):
    return RegressionEstimator(BasisSpec(degree=6)).bind(ens)


def test_constant_payload_is_reproduced(reg, ens):
    est = reg.project(4, np.full(ens.M, 2.5))
    np.testing.assert_allclose(est.values, 2.5, rtol=0, atol=1e-12)


def test_sine_payload_matches_heat_kernel(reg, ens):
    k = 4
    t = ens.grid.t[k]
    est = reg.project(k, np.sin(ens.W[:, -1, 0]), pointwise=True)
    truth = np.sin(ens.W[:, k, 0]) * math.exp(-(1 - t) / 2)
    mask = central_mask(ens.W[:, k], 0.9)
    err = np.abs(est.values - truth)[mask]
    assert np.all(err <= 3 * est.pointwise_se[mask] + 2e-3)
    assert np.quantile(err / est.pointwise_se[mask], 0.95) < 3


def test_martingale_payload(reg, ens):
    k = 3
    est = reg.project(k, ens.W[:, -1, 0], pointwise=True)
    mask = central_mask(ens.W[:, k], 0.9)
    err = np.abs(est.values - ens.W[:, k, 0])[mask]
    assert np.quantile(err / est.pointwise_se[mask], 0.95) < 3


def test_basis_function_projects_onto_itself(ens):
    state = ens.W[:, 5]
    spec = BasisSpec(degree=4)
    fb = spec.fit(state)
    col = fb(state)[:, 7]
    est = condexp_regress(col, 5, spec, state)
    assert np.max(np.abs(est.values - col)) / np.max(np.abs(col)) < 1e-8


def test_sine_regression_degree_five():
    ens = sample_brownian(TimeGrid(1.0, 2), 100_000, 1, seed=2)
    x = ens.W[:, 1, 0]
    est = condexp_regress(np.sin(ens.W[:, 2, 0]), 1, BasisSpec(degree=5), x)
    mask = central_mask(x, 0.9)
    err = np.abs(est.values - np.sin(x) * math.exp(-0.25))[mask]
    assert err.max() < 0.01


def test_pure_noise_gives_flat_fit(ens):
    rng = np.random.default_rng(0)
    noise = rng.normal(size=ens.M)
    x = ens.W[:, 4, 0]
    est = condexp_regress(noise, 4, BasisSpec(degree=1), x)
    assert np.allclose(est.values, est.values.mean(), atol=0.05)
    # slope coefficient against its own least-squares standard error
    A = est.basis(x)
    resid = noise - est.values
    sigma = resid.std(ddof=2)
    cov = np.linalg.inv(A.T @ A) * sigma ** 2
    assert abs(est.coef[1]) <= 3 * math.sqrt(cov[1, 1])


def test_rank_deficient_design_is_flagged(ens):
    x = ens.W[:, 4, :1]
    state = np.concatenate([x, 2 * x], axis=1)
    est = condexp_regress(np.sin(ens.W[:, -1, 0]), 4, BasisSpec(degree=3), state)
    assert est.rank_deficient
    ok = condexp_regress(np.sin(ens.W[:, -1, 0]), 4, BasisSpec(degree=3), x)
    np.testing.assert_allclose(est.values, ok.values, atol=1e-8)

    # the cached regressor takes its SVD fallback on the same design
    states = np.repeat(ens.W[:, :, :1], 2, axis=2)
    states[:, :, 1] *= 2
    bound = RegressionEstimator(BasisSpec(degree=3)).bind(ens, states)
    est2 = bound.project(4, np.sin(ens.W[:, -1, 0]))
    assert est2.rank_deficient
    np.testing.assert_allclose(est2.values, ok.values, atol=1e-8)


def test_too_few_paths_raise(ens):
    small = sample_brownian(TimeGrid(1.0, 2), 50, 2, seed=0)
    with pytest.raises(ValueError, match="fewer than"):
        condexp_regress(np.zeros(50), 1, BasisSpec(degree=4), small.W[:, 1])


def test_extract_z_trivial_cases(reg, ens):
    k = 5
    Z = extract_z(np.full((ens.M, 1), 3.0), k, ens, regressor=reg)
    assert np.max(np.abs(Z)) < 1e-10
    Z = extract_z(ens.W[:, k + 1, :1], k, ens, regressor=reg)
    np.testing.assert_allclose(Z[:, 0, :], np.broadcast_to([1.0, 0.0], (ens.M, 2)), atol=1e-8)


def test_weighted_trivial_cases(reg, ens):
    w1 = stochastic_exponential(ens, 0.0)
    payload = np.sin(ens.W[:, -1, 0])
    a = weighted_condexp(payload, 3, w1, regressor=reg)
    b = reg.project(3, payload)
    np.testing.assert_allclose(a.values, b.values, atol=1e-12)
    w = stochastic_exponential(ens, np.array([0.3, 0.1]))
    one = weighted_condexp(np.ones(ens.M), 3, w, regressor=reg)
    np.testing.assert_allclose(one.values, 1.0, atol=1e-10)


def test_weighted_shift_mean(ens, reg):
    h = 0.4
    w = stochastic_exponential(ens, np.array([h, 0.0]))
    est = weighted_condexp(ens.W[:, -1, 0], 0, w, regressor=reg)
    assert abs(est.values.mean() - h * 1.0) <= 3 * est.se


def test_nested_constant_and_sine(ens):
    nest = NestedEstimator(branching=2000, seed=3)
    est = condexp_nested(lambda p: np.full(len(p), 1.5), 4, ens, nest, paths=[0, 1, 2])
    np.testing.assert_array_equal(est.values[:, 0], 1.5)

    k = 4
    t = ens.grid.t[k]
    est = condexp_nested(lambda p: np.sin(p[:, -1, 0]), k, ens, nest, paths=range(10))
    truth = np.sin(ens.W[:10, k, 0]) * math.exp(-(1 - t) / 2)
    assert np.all(np.abs(est.values[:, 0] - truth) <= 4 * est.pointwise_se[:, 0])


def test_nested_slope_is_exact_for_affine_payload(ens):
    nest = NestedEstimator(branching=200, seed=0)
    k = 2
    Z = extract_z(lambda p: np.stack([3 * p[:, k + 1, 0] - p[:, k + 1, 1]], axis=1), k, ens, nest,
                  paths=[0, 7])
    np.testing.assert_allclose(Z[:, 0, :], [[3.0, -1.0], [3.0, -1.0]], atol=1e-10)


def test_nested_budget_guard(ens):
    nest = NestedEstimator(branching=1000, budget=1e4)
    with pytest.raises(NestedBudgetError):
        condexp_nested(lambda p: p[:, -1, 0], 0, ens, nest, paths=range(5))


def test_nested_weighted_shift(ens):
    h = 0.4
    nest = NestedEstimator(branching=20_000, seed=5)
    est = weighted_condexp(lambda p: p[:, -1, 0], 0, lambda t, pre: np.tile([h, 0.0], (len(pre), 1)),
                           nest, ensemble=ens, paths=[0])
    assert abs(est.values[0, 0] - h) <= 3 * est.pointwise_se[0, 0]


def test_coefficient_export(tmp_path):
    export_coefficients(tmp_path / "c.csv", {0: np.array([1.0, 2.0]), 3: np.ones((2, 2))})
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "knot,coordinate,basis_index,coefficient"
    assert len(rows) == 1 + 2 + 4


def test_piecewise_basis_indicator_rows(ens):
    fb = BasisSpec(family="piecewise", cells=4).fit(ens.W[:, 3, :1])
    A = fb(ens.W[:, 3, :1])
    assert A.shape == (ens.M, 4)
    assert np.all(A[:, 0] == 1.0)
    assert np.all(A[:, 1:].sum(axis=1) <= 1.0)
