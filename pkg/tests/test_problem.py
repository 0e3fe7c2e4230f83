import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbsde.problem import (BsdeProblem, Projectable, RhoSpec, Subquadratic, apriori_y_bound,
                           fbsde_q_bound, projectable_problem, projected_scalar_driver,
                           subquadratic_problem, truncate_pi_L, validate_problem)


def zeros_like_y(t, prefix, y, z):
    return np.zeros_like(y)


def bounded_terminal(paths):
    return 0.5 * np.sin(paths[:, -1, :2])


def test_zero_driver_satisfies_every_growth_condition():
    p = subquadratic_problem(zeros_like_y, zeros_like_y, bounded_terminal, 2, 2, 1.0,
                             C=1.0, eps=0.5, rho=RhoSpec.constant(1.0))
    rep = validate_problem(p, samples=2000)
    assert rep.passes
    # growth margin is 0 - C (1 + |y| + ...) <= -C
    assert rep["B2"].max_margin <= -1.0


def test_quadratic_driver_declared_subquadratic_is_caught():
    def quad(t, prefix, y, z):
        out = np.zeros_like(y)
        out[:, 0] = np.sum(z * z, axis=(1, 2))
        return out

    p = subquadratic_problem(zeros_like_y, quad, bounded_terminal, 2, 2, 1.0,
                             C=1.0, eps=0.5, rho=RhoSpec.constant(1.0))
    rep = validate_problem(p, samples=2000)
    assert not rep["B2"].passes
    assert rep["B2"].max_margin > 0


def test_b4_g_margin_is_nonpositive_for_aligned_drift():
    # G = rho(|y|) |z| z u with a unit vector u: y'G = rho |z| (y'z).u <= rho |z| |y'z|
    direction = np.array([0.6, 0.8])

    def G(t, prefix, y, z):
        r = np.sqrt(np.sum(y * y, axis=1))
        nz = np.sqrt(np.sum(z * z, axis=(1, 2)))
        return np.einsum("mdn,n->md", z, direction) * (r * nz)[:, None]

    p = subquadratic_problem(zeros_like_y, G, bounded_terminal, 2, 2, 1.0,
                             C=1.0, eps=0.5, rho=RhoSpec((0.0, 1.0)))
    rep = validate_problem(p, samples=10_000)
    assert rep["B4-G"].passes

    # independent brute force of y'G - |y'z| rho(|y|) |z| over fresh points
    rng = np.random.default_rng(7)
    y = rng.normal(size=(10_000, 2)) * 10 ** rng.uniform(-2, 2, (10_000, 1))
    z = rng.normal(size=(10_000, 2, 2)) * 10 ** rng.uniform(-2, 2, (10_000, 1, 1))
    ny = np.linalg.norm(y, axis=1)
    lhs = np.sum(y * G(0.0, None, y, z), axis=1)
    rhs = np.linalg.norm(np.einsum("md,mdn->mn", y, z), axis=1) * ny * np.linalg.norm(z, axis=(1, 2))
    assert np.all(lhs - rhs <= 1e-9 * (1 + np.abs(rhs)))


def test_truncation_examples():
    y, _ = truncate_pi_L(np.array([3.0, 4.0]), np.zeros((2, 2)), 10.0)
    np.testing.assert_array_equal(y, [3.0, 4.0])
    y, _ = truncate_pi_L(np.array([3.0, 4.0]), np.zeros((2, 2)), 1.0)
    np.testing.assert_allclose(y, [0.6, 0.8], rtol=1e-15)
    _, z = truncate_pi_L(np.zeros(2), np.eye(2), 1.0)
    np.testing.assert_allclose(z, np.eye(2) / math.sqrt(2.0), rtol=1e-15)


@given(st.floats(0.1, 10.0), st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_truncation_lands_in_ball_and_is_idempotent(L, seed):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=(20, 3)) * 5
    z = rng.normal(size=(20, 3, 2)) * 5
    ty, tz = truncate_pi_L(y, z, L)
    assert np.all(np.linalg.norm(ty, axis=1) <= L * (1 + 1e-12))
    assert np.all(np.linalg.norm(tz.reshape(20, -1), axis=1) <= L * (1 + 1e-12))
    ty2, tz2 = truncate_pi_L(ty, tz, L)
    np.testing.assert_allclose(ty2, ty, rtol=1e-12)
    np.testing.assert_allclose(tz2, tz, rtol=1e-12)


def test_truncation_rejects_nonpositive_radius():
    with pytest.raises(ValueError):
        truncate_pi_L(np.ones(2), np.ones((2, 2)), 0.0)


def _proj(a, P, Q, R):
    return Projectable(np.asarray(a, dtype=float), P, Q, R)


def test_projected_driver_examples():
    zeroP = lambda t, pre, u, v: np.zeros((len(u), 2))  # noqa: E731
    zeroQ = lambda t, pre, u, v: np.zeros(len(u))  # noqa: E731
    zeroR = lambda t, pre, u, v: np.zeros_like(v)  # noqa: E731
    u = np.array([3.0])
    v = np.array([[0.5, -0.5]])
    s = _proj([1.0, 1.0], zeroP, zeroQ, zeroR)
    assert projected_scalar_driver(s, 0.0, None, u, v)[0] == 0.0

    s = _proj([1.0, 1.0], lambda t, pre, u, v: np.tile([1.0, 0.0], (len(u), 1)),
              lambda t, pre, u, v: np.full(len(u), 2.0), zeroR)
    assert projected_scalar_driver(s, 0.0, None, u, v)[0] == pytest.approx(7.0, abs=1e-15)

    s = _proj([1.0, 0.0], zeroP, zeroQ, lambda t, pre, u, v: v)
    assert projected_scalar_driver(s, 0.0, None, u, v)[0] == pytest.approx(0.5, abs=1e-15)


def test_projectable_driver_matches_projection():
    # a' f(y, z) equals the scalar driver at (a'y, a'z)
    rng = np.random.default_rng(3)
    P = lambda t, pre, u, v: np.stack([np.cos(u), np.sin(u)], axis=1)  # noqa: E731
    Q = lambda t, pre, u, v: 0.4 * np.sin(u)  # noqa: E731
    R = lambda t, pre, u, v: 0.25 * v  # noqa: E731
    p = projectable_problem([1.0, 1.0], P, Q, R, bounded_terminal, 2, 2, 1.0)
    y = rng.normal(size=(50, 2))
    z = rng.normal(size=(50, 2, 2))
    f = p.driver(0.1, None, y, z)
    a = p.structure.a
    u, v = y @ a, np.einsum("d,mdn->mn", a, z)
    np.testing.assert_allclose(f @ a, projected_scalar_driver(p.structure, 0.1, None, u, v),
                               rtol=1e-13)


def test_q_bound_constants():
    assert fbsde_q_bound(0.0, 1.0) == (1.0, 0.0)
    a, b = fbsde_q_bound(1.0, 0.5)
    assert a == 5.0
    assert b == pytest.approx(math.exp(2.5) * 1.5, rel=1e-15)


def test_apriori_bound_shape_and_monotonicity():
    t = np.linspace(0, 1, 11)
    phi = apriori_y_bound(0.5, 1.0, t)
    assert phi[-1] == pytest.approx(1.5)
    assert phi[0] == pytest.approx(1.5 * math.exp(1.5 ** 2 / 2))
    assert np.all(np.diff(phi) < 0)
    with pytest.raises(ValueError):
        apriori_y_bound(1.0, 1.0, 2.0)


def test_structure_validation_errors():
    with pytest.raises(ValueError):
        Subquadratic(1.0, 1.0, RhoSpec(), zeros_like_y, zeros_like_y)
    with pytest.raises(ValueError):
        RhoSpec((-1.0,))
    with pytest.raises(ValueError):
        _proj([0.0, 0.0], None, None, None)
    with pytest.raises(ValueError):
        BsdeProblem(0, 1, 1.0, bounded_terminal, zeros_like_y)


def test_rho_is_a_polynomial_in_r():
    rho = RhoSpec((1.0, 2.0, 3.0))
    assert rho(2.0) == 1 + 4 + 12
    np.testing.assert_allclose(rho(np.array([0.0, 1.0])), [1.0, 6.0])


def test_nonfinite_driver_is_reported():
    def bad(t, prefix, y, z):
        return y / 0.0

    p = subquadratic_problem(zeros_like_y, bad, bounded_terminal, 2, 2, 1.0,
                             C=1.0, eps=0.5, rho=RhoSpec())
    with np.errstate(all="ignore"):
        rep = validate_problem(p, samples=500)
    assert not rep["driver_finite"].passes
    assert rep["driver_finite"].nonfinite > 0
