import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbsde.simulate import (NonFiniteError, TimeGrid, brownian_suffixes, euler_forward, euler_gamma,
                            girsanov_shift, load_ensemble, sample_brownian, save_ensemble,
                            stochastic_exponential, weighted_mean)


@pytest.fixture(scope="module")
def big():
    return sample_brownian(TimeGrid(1.0, 8), 100_000, 2, seed=11)


def test_one_step_endpoint_is_centred():
    T, M = 2.0, 20_000
    ens = sample_brownian(TimeGrid(T, 1), M, 2, seed=5)
    assert ens.W.shape == (M, 2, 2)
    assert np.all(ens.W[:, 0] == 0)
    assert abs(ens.W[:, 1, 0].mean()) <= 3 * math.sqrt(T / M)


def test_same_seed_same_paths():
    g = TimeGrid(1.0, 16)
    a = sample_brownian(g, 500, 2, seed=3)
    b = sample_brownian(g, 500, 2, seed=3)
    np.testing.assert_array_equal(a.dW, b.dW)
    c = sample_brownian(g, 500, 2, seed=4)
    assert not np.array_equal(a.dW, c.dW)


def test_paths_do_not_depend_on_ensemble_size():
    g = TimeGrid(1.0, 4)
    small = sample_brownian(g, 10, 1, seed=9)
    large = sample_brownian(g, 100, 1, seed=9)
    np.testing.assert_array_equal(small.dW, large.dW[:10])


def test_terminal_variance(big):
    # chi-square interval at M = 1e5: sd of the sample variance is sqrt(2/M) ~ 0.0045
    v = big.W[:, -1, 0].var(ddof=1)
    assert 0.99 <= v <= 1.01


def test_forward_without_drift_is_brownian(big):
    X = euler_forward(big, lambda t, x, k: np.zeros_like(x), 0.0)
    np.testing.assert_array_equal(X, big.W)


def test_forward_constant_drift(big):
    g = np.array([0.3, -0.7])
    X = euler_forward(big, lambda t, x, k: g, 0.0)
    np.testing.assert_allclose(X, big.W + g * big.grid.t[None, :, None], atol=1e-13)


def test_ornstein_uhlenbeck_moments():
    ens = sample_brownian(TimeGrid(1.0, 2 ** 10), 20_000, 1, seed=1)
    X = euler_forward(ens, lambda t, x, k: -x, 0.0)
    xt = X[:, -1, 0]
    se = xt.std(ddof=1) / math.sqrt(len(xt))
    assert abs(xt.mean()) <= 3 * se
    assert xt.var(ddof=1) == pytest.approx((1 - math.exp(-2)) / 2, rel=0.02)


def test_forward_reports_nonfinite_drift():
    ens = sample_brownian(TimeGrid(1.0, 4), 10, 1, seed=0)

    def drift(t, x, k):
        out = np.zeros_like(x)
        if k == 2:
            out[3] = np.nan
        return out

    with pytest.raises(NonFiniteError) as info:
        euler_forward(ens, drift, 0.0)
    assert (info.value.path, info.value.knot) == (3, 2)


def test_gamma_trivial_cases(big):
    np.testing.assert_array_equal(euler_gamma(big, 0.0, 0.0), np.ones((big.M, big.N + 1)))
    G = euler_gamma(big, 0.7, 0.0)
    np.testing.assert_allclose(G, np.exp(0.7 * big.grid.t)[None, :].repeat(big.M, 0), rtol=1e-14)


def test_gamma_martingale(big):
    G = euler_gamma(big, 0.0, np.array([0.4, -0.3]))
    gT = G[:, -1]
    assert abs(gT.mean() - 1) <= 3 * gT.std(ddof=1) / math.sqrt(big.M)


def test_stochastic_exponential(big):
    w = stochastic_exponential(big, np.zeros((big.M, big.N, 2)))
    np.testing.assert_array_equal(w.weights, 1.0)
    h = np.array([0.5, 0.2])
    w = stochastic_exponential(big, h)
    m, se = w.mean_terminal()
    assert abs(m - 1) <= 3 * se
    # E(H) E(-H) = exp(-int |H|^2 dt) exactly on the grid
    w2 = stochastic_exponential(big, -h)
    prod = w.weights * w2.weights
    expect = np.exp(-np.sum(h * h) * big.grid.t)
    np.testing.assert_allclose(prod, np.broadcast_to(expect, prod.shape), rtol=1e-12)


def test_girsanov_shift_identities(big):
    zero = stochastic_exponential(big, 0.0)
    np.testing.assert_array_equal(girsanov_shift(big, zero).dW, big.dW)

    h = np.array([0.3, 0.0])
    w = stochastic_exponential(big, h)
    shifted = girsanov_shift(big, w)
    assert shifted.shifted
    np.testing.assert_allclose(shifted.dW, big.dW - h * big.grid.dt, atol=1e-15)
    # under the new measure W_T has mean h T
    m, se = weighted_mean(big.W[:, -1, :], w.terminal)
    assert np.all(np.abs(m - h * 1.0) <= 3 * se)
    # Gaussian MGF under the shifted measure
    theta = 0.8
    m, se = weighted_mean(np.exp(theta * big.W[:, -1, 0]), w.terminal)
    assert abs(m - math.exp(theta * 0.3 + theta ** 2 / 2)) <= 3 * se


def test_save_and_load_roundtrip(tmp_path):
    ens = sample_brownian(TimeGrid(0.5, 5), 30, 2, seed=42)
    save_ensemble(tmp_path / "e.bin", ens)
    back = load_ensemble(tmp_path / "e.bin")
    np.testing.assert_array_equal(back.dW, ens.dW)
    assert (back.grid.T, back.N, back.seed) == (0.5, 5, 42)


def test_suffixes_share_the_prefix():
    ens = sample_brownian(TimeGrid(1.0, 8), 5, 2, seed=0)
    out = brownian_suffixes(ens, 3, [0, 4], 50, seed=1)
    assert out.shape == (2, 50, 9, 2)
    np.testing.assert_array_equal(out[1, :, :4], np.broadcast_to(ens.W[4, :4], (50, 4, 2)))
    again = brownian_suffixes(ens, 3, [4], 50, seed=1)
    np.testing.assert_array_equal(again[0], out[1])


def test_coarsen_keeps_the_path():
    ens = sample_brownian(TimeGrid(1.0, 8), 10, 1, seed=0)
    c = ens.coarsen(4)
    np.testing.assert_allclose(c.W, ens.W[:, ::4], atol=1e-15)
    with pytest.raises(ValueError):
        ens.coarsen(3)


@given(st.integers(1, 40), st.integers(1, 3), st.integers(0, 2 ** 40))
@settings(max_examples=30, deadline=None)
def test_increments_sum_to_endpoint(N, n, seed):
    ens = sample_brownian(TimeGrid(1.0, N), 7, n, seed)
    np.testing.assert_allclose(ens.W[:, -1], ens.dW.sum(axis=1), atol=1e-12)


def test_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid(0.0, 4)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 4, (3, 2))
    g = TimeGrid(1.0, 4)
    assert g.knot(0.75) == 3
    with pytest.raises(ValueError):
        g.knot(0.3)
