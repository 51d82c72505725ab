from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from basisrisk.regression import RegressionBasis, exponents


@pytest.mark.parametrize("m,degree", [(1, 0), (1, 3), (2, 3), (3, 2), (3, 4)])
def test_polynomial_basis_size(m, degree):
    assert len(exponents(m, degree)) == comb(m + degree, degree)
    assert RegressionBasis(degree=degree, family="polynomial").size(m) == comb(m + degree, degree)


def test_polynomial_fit_reproduces_cubics(rng):
    R = rng.normal(size=(2000, 2)) * [3.0, 0.5] + [10.0, -1.0]
    y = 1.0 + R[:, 0] - 0.3 * R[:, 0] * R[:, 1] ** 2 + 0.01 * R[:, 0] ** 3
    ls = RegressionBasis(degree=3, family="polynomial", tail=None).fit(R)
    c = ls.coef(y)
    np.testing.assert_allclose(ls.fitted(c), y, rtol=1e-9, atol=1e-9)
    g = np.einsum("npm,p->nm", ls.features.design_grad(R[:5]), c)
    exact = np.stack([1.0 - 0.3 * R[:5, 1] ** 2 + 0.03 * R[:5, 0] ** 2, -0.6 * R[:5, 0] * R[:5, 1]], axis=1)
    np.testing.assert_allclose(g, exact, rtol=1e-8)


def test_local_fit_reproduces_affine_functions(rng):
    R = rng.normal(size=(5000, 2)) @ np.array([[1.0, 0.6], [0.0, 0.8]])
    y = 2.0 + 3.0 * R[:, 0] - 1.5 * R[:, 1]
    # with tail=None the end knots are the sample extremes, so affine maps are in the span
    ls = RegressionBasis(tail=None, order=1).fit(R)
    c = ls.coef(y)
    np.testing.assert_allclose(ls.fitted(c), y, atol=1e-9)
    inner = np.abs(R).max(axis=1) < 1.5
    g = np.einsum("npm,p->nm", ls.features.design_grad(R[inner][:20]), c)
    np.testing.assert_allclose(g, np.tile([3.0, -1.5], (20, 1)), atol=1e-8)


def test_constant_function_is_in_every_basis(rng):
    R = rng.lognormal(size=(3000, 1))
    for basis in (RegressionBasis(), RegressionBasis(family="polynomial", degree=5)):
        ls = basis.fit(R)
        np.testing.assert_allclose(ls.fitted(ls.coef(np.full(len(R), 4.2))), 4.2, rtol=1e-12)


def test_degenerate_cross_section_uses_constant():
    R = np.full((100, 2), 3.0)
    for basis in (RegressionBasis(), RegressionBasis(family="polynomial")):
        ls = basis.fit(R)
        assert ls.features.size == 1
        assert ls.coef(np.arange(100.0))[0] == pytest.approx(49.5)


def test_degree_reduction_is_recorded():
    R = np.repeat(np.array([[0.0], [1.0], [2.0]]), 50, axis=0)  # three distinct states support degree 2
    basis = RegressionBasis(family="polynomial", degree=4, tail=None)
    ls = basis.fit(R, step=7)
    assert ls.features.degree == 2
    assert basis.reductions == [(7, 4, 2)]


@pytest.mark.parametrize("order,knots_left", [(1, 5), (2, 4)])
def test_knot_reduction_is_recorded(order, knots_left):
    # without smoothing five distinct states support five basis functions
    R = np.repeat(np.arange(5.0)[:, None], 40, axis=0)
    basis = RegressionBasis(knots=12, tail=None, order=order, smoothing=0.0)
    ls = basis.fit(R, step=3)
    assert ls.features.size <= 5
    assert basis.reductions == [(3, 12, knots_left)]


def test_quadratic_splines_reproduce_quadratics(rng):
    R = rng.normal(size=(4000, 1)) * 2.0 + 1.0
    y = 0.5 - R[:, 0] + 0.25 * R[:, 0] ** 2
    ls = RegressionBasis(tail=None, order=2, knots=6, smoothing=0.0).fit(R)
    c = ls.coef(y)
    np.testing.assert_allclose(ls.fitted(c), y, atol=1e-8)
    x = np.linspace(-1.0, 3.0, 9)[:, None]
    g = np.einsum("npm,p->nm", ls.features.design_grad(x), c)[:, 0]
    np.testing.assert_allclose(g, -1.0 + 0.5 * x[:, 0], atol=1e-8)


def test_spline_gradient_matches_finite_differences(rng):
    R = rng.normal(size=(3000, 2)) @ np.array([[1.0, 0.5], [0.0, 0.8]])
    feats = RegressionBasis(order=2, knots=6).fit(R).features
    c = rng.normal(size=feats.size)
    x = rng.normal(size=(6, 2)) * 0.7
    g = np.einsum("npm,p->nm", feats.design_grad(x), c)
    eps = 1e-6
    fd = np.stack([(feats.design(x + eps * e) @ c - feats.design(x - eps * e) @ c) / (2 * eps) for e in np.eye(2)], 1)
    np.testing.assert_allclose(g, fd, atol=1e-7)


def test_penalty_regularises_empty_corners(rng):
    # an empty quadrant leaves tensor functions without paths; the penalty
    # fills them in by affine extrapolation instead of forcing fewer knots
    R = rng.uniform(-1, 1, size=(3000, 2))
    R = R[~((R[:, 0] > 0) & (R[:, 1] > 0))]
    y = 1.0 + R[:, 0] - 2.0 * R[:, 1]
    assert RegressionBasis(knots=5, smoothing=0.0).fit(R).features.size < 36
    ls = RegressionBasis(knots=5, tail=None).fit(R)
    assert ls.features.size == 36
    np.testing.assert_allclose(ls.fitted(ls.coef(y)), y, atol=1e-8)


def test_invalid_settings():
    with pytest.raises(ValueError):
        RegressionBasis(family="spline")
    with pytest.raises(ValueError):
        RegressionBasis(knots=1)
    with pytest.raises(ValueError):
        RegressionBasis(order=3)
    with pytest.raises(ValueError):
        RegressionBasis(smoothing=-1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-50, 50), st.floats(0.01, 100))
def test_fit_is_shift_and_scale_equivariant(seed, shift, scale):
    rng = np.random.default_rng(seed)
    R = rng.normal(size=(600, 1))
    y = np.sin(2 * R[:, 0]) + rng.normal(size=600) * 0.1
    base = RegressionBasis(knots=8).fit(R)
    moved = RegressionBasis(knots=8).fit(R * scale + shift)
    np.testing.assert_allclose(base.fitted(base.coef(y)), moved.fitted(moved.coef(y)), atol=1e-8)


def test_leverage_sums_to_basis_size(rng):
    R = rng.normal(size=(800, 1))
    ls = RegressionBasis(knots=10, smoothing=0.0).fit(R)
    assert ls.leverage(R).sum() == pytest.approx(ls.features.size, rel=1e-9)
    # with the penalty the trace of the hat matrix is the effective dimension
    pen = RegressionBasis(knots=10).fit(R)
    assert 2 < pen.leverage(R).sum() < pen.features.size
