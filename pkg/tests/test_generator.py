import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from basisrisk import payoffs
from basisrisk.generator import (EllipticityError, context_from, driver, driver_grad_r, driver_grad_z,
                                 growth_constant, make_context, project)
from basisrisk.market import MarketSpec
from basisrisk.scenarios import build_spec

from conftest import constant_spec

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def crack_spec(g1=0.3, g2=0.25, g3=0.15, g4=0.1, b1=0.28, b2=0.12):
    vol = [[g1, 0.0, 0.0], [g2, g3, g4]]
    beta = [[g1, 0.0, 0.0], [b1, b2, 0.0]]
    return build_spec(2, 2, 3, "constant", [0.0, 0.0], vol, [0.04, 0.03], beta, 0.1, 0.5, payoffs.zero())


def state_dependent_spec():
    """Asset drift and volatility that move with the index, for r-gradients."""

    def alpha(t, r):
        return np.stack([0.05 + 0.1 * np.sin(r[:, 0]), 0.02 * r[:, 1] ** 2 / (1 + r[:, 1] ** 2)], axis=1)

    def beta(t, r):
        n = len(r)
        out = np.zeros((n, 2, 3))
        out[:, 0, 0] = 1.0 + 0.2 * np.cos(r[:, 1])
        out[:, 0, 2] = 0.3 * r[:, 0] / (1 + r[:, 0] ** 2)
        out[:, 1, 1] = 0.8 + 0.1 * np.tanh(r[:, 0])
        out[:, 1, 2] = 0.2
        return out

    def b(t, r):
        return np.zeros_like(r)

    def rho(t, r):
        return np.broadcast_to(np.array([[0.2, 0.1, 0.0], [0.0, 0.3, 0.1]]), (len(r), 2, 3)).copy()

    return MarketSpec(m=2, k=2, d=3, b=b, rho=rho, alpha=alpha, beta=beta, eta=0.7, T=1.0, F=payoffs.zero())


def test_identity_market():
    ctx = context_from(np.array([[0.1, -0.2]]), np.eye(2)[None], eta=0.5)
    np.testing.assert_allclose(ctx.theta[0], [0.1, -0.2], atol=1e-14)
    np.testing.assert_allclose(ctx.P[0], np.eye(2), atol=1e-14)


def test_crack_spread_pseudo_inverse_matches_closed_form():
    g1, b1, b2 = 0.3, 0.28, 0.12
    ctx = make_context(crack_spec(g1=g1, b1=b1, b2=b2), 0.0, np.zeros((1, 2)))
    expected = np.array([[b2, 0.0], [-b1, g1], [0.0, 0.0]]) / (g1 * b2)
    np.testing.assert_allclose(ctx.pseudo[0], expected, atol=1e-10)


def test_crack_spread_projection_of_price_exposure():
    g1, g2, g3, g4 = 0.3, 0.25, 0.15, 0.1
    spec = crack_spec(g1, g2, g3, g4)
    ctx = make_context(spec, 0.0, np.zeros((1, 2)))
    for d1, d2 in [(0.7, -1.3), (-2.0, 0.4), (1e-3, 5.0)]:
        z = np.array([[d1, d2]]) @ np.asarray(spec.rho(0.0, np.zeros((1, 2))))[0]
        expected = [g1 * d1 + g2 * d2, g3 * d2, 0.0]
        np.testing.assert_allclose(project(ctx, z)[0], expected, atol=1e-10)


def test_rank_one_projector(rng):
    beta = np.array([[0.6, -1.1]])
    ctx = context_from(np.array([[0.05]]), beta[None], eta=1.0)
    for z in rng.normal(size=(5, 2)):
        expected = (beta[0] @ z) / (beta[0] @ beta[0]) * beta[0]
        np.testing.assert_allclose(project(ctx, z[None])[0], expected, atol=1e-12)


def test_projection_fixes_trading_space_and_kills_complement(rng):
    spec = constant_spec(1, 2, 4)
    ctx = make_context(spec, 0.0, np.zeros((1, 1)))
    beta = ctx.beta[0]
    x = rng.normal(size=2)
    np.testing.assert_allclose(project(ctx, (x @ beta)[None])[0], x @ beta, atol=1e-10)
    null = np.linalg.svd(beta)[2][2:]  # rows orthogonal to all rows of beta
    for z in null:
        np.testing.assert_allclose(project(ctx, z[None])[0], 0.0, atol=1e-10)


def test_ellipticity_violation_raises():
    beta = np.array([[[1.0, 0.0], [1.0, 1e-9]]])
    with pytest.raises(EllipticityError, match="condition number"):
        context_from(np.zeros((1, 2)), beta, eta=1.0)


def test_driver_without_distance_term(rng):
    spec = constant_spec(1, 2, 3, eta=0.4)
    ctx = make_context(spec, 0.0, np.zeros((1, 1)))
    th, eta = ctx.theta[0], ctx.eta
    z = rng.normal(size=2) @ ctx.beta[0] - th / eta  # z + theta/eta lies in the trading space
    np.testing.assert_allclose(driver(ctx, z[None])[0], z @ th + th @ th / (2 * eta), rtol=1e-12)


def test_complete_market_driver_is_affine(rng):
    spec = constant_spec(1, 3, 3)
    ctx = make_context(spec, 0.0, np.zeros((1, 1)))
    th, eta = ctx.theta[0], ctx.eta
    for z in rng.normal(size=(4, 3)):
        np.testing.assert_allclose(driver(ctx, z[None])[0], z @ th + th @ th / (2 * eta), rtol=1e-12)
    np.testing.assert_allclose(driver_grad_z(ctx, rng.normal(size=(1, 3)))[0], th, atol=1e-12)


def test_distance_matches_lattice_minimisation():
    # theta = 0 and z orthogonal to the trading space: f = -(eta/2) min_x |z - x beta|^2
    beta = np.array([[1.0, 0.5, 0.0]])
    eta = 0.8
    ctx = context_from(np.zeros((1, 1)), beta[None], eta)
    z = np.array([0.3, -0.6, 1.2])
    xs = np.linspace(-3, 3, 600001)
    dist2 = np.min(np.sum((z[None] - xs[:, None] * beta[0]) ** 2, axis=1))
    assert driver(ctx, z[None])[0] == pytest.approx(-0.5 * eta * dist2, rel=1e-8)
    z_perp = np.array([0.5, -1.0, 0.7])  # orthogonal to beta
    assert driver(ctx, z_perp[None])[0] == pytest.approx(-0.5 * eta * z_perp @ z_perp, rel=1e-12)


def test_grad_z_matches_finite_differences(rng):
    spec = constant_spec(2, 2, 4, eta=0.6)
    ctx = make_context(spec, 0.0, np.zeros((1, 2)))
    z = rng.normal(size=(1, 4))
    g = driver_grad_z(ctx, z)[0]
    eps = 1e-6
    fd = [(driver(ctx, z + eps * e)[0] - driver(ctx, z - eps * e)[0]) / (2 * eps) for e in np.eye(4)[:, None]]
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_r_matches_finite_differences(seed):
    spec = state_dependent_spec()
    rng = np.random.default_rng(seed)
    r = rng.normal(size=(1, 2))
    z = rng.normal(size=(1, 3))
    g = driver_grad_r(spec, 0.3, r, z)[0]
    eps = 1e-5
    fd = []
    for e in np.eye(2):
        up = driver(make_context(spec, 0.3, r + eps * e), z)[0]
        dn = driver(make_context(spec, 0.3, r - eps * e), z)[0]
        fd.append((up - dn) / (2 * eps))
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


def test_grad_r_vanishes_for_constant_coefficients(rng):
    spec = constant_spec(2, 1, 3)
    g = driver_grad_r(spec, 0.0, rng.normal(size=(5, 2)), rng.normal(size=(5, 3)))
    np.testing.assert_allclose(g, 0.0, atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(arrays(float, (2, 4), elements=finite), arrays(float, 2, elements=finite),
       arrays(float, 4, elements=finite))
def test_context_invariants(beta, alpha, z):
    beta = beta + 2.0 * np.eye(2, 4)
    if np.linalg.cond(beta @ beta.T) > 1e8:
        return
    ctx = context_from(alpha[None], beta[None], eta=0.3)
    P = ctx.P[0]
    assert np.abs(P @ P - P).max() <= 1e-10
    assert np.abs(P - P.T).max() <= 1e-10
    assert abs(np.trace(P) - 2) <= 1e-8
    assert np.abs(P @ ctx.theta[0] - ctx.theta[0]).max() <= 1e-10
    th = ctx.theta[0]
    f = driver(ctx, z[None])[0]
    assert f <= z @ th + th @ th / (2 * ctx.eta) + 1e-12
    assert abs(f) <= growth_constant(ctx) * (1 + z @ z) + 1e-12
    pz = project(ctx, z[None])[0]
    np.testing.assert_allclose(project(ctx, pz[None])[0], pz, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(arrays(float, (2, 3), elements=finite))
def test_driver_lipschitz_in_state(zs):
    spec = state_dependent_spec()
    lattice = np.stack(np.meshgrid(np.linspace(-1, 1, 5), np.linspace(-1, 1, 5)), -1).reshape(-1, 2)
    # constant K estimated once on a fine lattice, then checked on the hypothesis draws
    K = 0.0
    for z in np.random.default_rng(0).normal(size=(10, 3)) * 2:
        g = driver_grad_r(spec, 0.0, lattice, np.tile(z, (len(lattice), 1)))
        K = max(K, float(np.max(np.linalg.norm(g, axis=1))) / (1 + np.linalg.norm(z)))
    K *= 2.0
    for z in zs:
        f = driver(make_context(spec, 0.0, lattice), np.tile(z, (len(lattice), 1)))
        df = np.abs(f[1:] - f[:-1])
        dr = np.linalg.norm(lattice[1:] - lattice[:-1], axis=1)
        assert (df <= K * (1 + np.linalg.norm(z)) * dr + 1e-12).all()


def test_grad_z_linear_growth(rng):
    spec = constant_spec(1, 1, 3, eta=2.0)
    ctx = make_context(spec, 0.0, np.zeros((1, 1)))
    M = np.linalg.norm(ctx.theta[0]) + ctx.eta * (1 + np.linalg.norm(ctx.theta[0]) / ctx.eta)
    for z in rng.normal(size=(20, 3)) * 10:
        assert np.linalg.norm(driver_grad_z(ctx, z[None])[0]) <= M * (1 + np.linalg.norm(z))
