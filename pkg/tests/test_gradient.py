import numpy as np
import pytest

from basisrisk import payoffs
from basisrisk.analytic import bs_call_delta
from basisrisk.bsde import BsdeError, Terminal, solve_backward
from basisrisk.gradient import (HedgeTriangulation, bump_gradient, check_z_representation, lipschitz_audit,
                                solve_gradient_bsde)
from basisrisk.market import simulate_flow, simulate_paths

from conftest import basis_risk_spec, bs_spec

SMOOTH = payoffs.smooth_step(100.0, 10.0, 20.0)


@pytest.fixture(scope="module")
def smooth_case():
    spec = basis_risk_spec(SMOOTH)
    ens = simulate_flow(spec, simulate_paths(spec, 0.0, [100.0], 8000, 20, seed=6))
    sol = solve_backward(ens, spec, Terminal.WITH_CLAIM)
    return spec, ens, sol


def test_gradient_bsde_matches_black_scholes_delta():
    spec = bs_spec(payoffs.call(100.0, 1000.0), mu=0.0)
    ens = simulate_flow(spec, simulate_paths(spec, 0.0, [100.0], 20000, 20, seed=3))
    grad = solve_gradient_bsde(solve_backward(ens, spec, Terminal.WITH_CLAIM), ens, spec)
    assert grad.full_jacobian
    assert grad.y0[0] == pytest.approx(bs_call_delta(100.0, 100.0, 0.2, 1.0), rel=0.02)


def test_gradient_bsde_matches_common_random_number_bump(smooth_case):
    spec, ens, sol = smooth_case
    g = solve_gradient_bsde(sol, ens, spec).y0
    bump = bump_gradient(spec, [100.0], 8000, 20, seed=6)
    assert g[0] == pytest.approx(bump[0], rel=0.02)


def test_directional_derivative(smooth_case):
    spec, ens, sol = smooth_case
    full = solve_gradient_bsde(sol, ens, spec)
    dirn = solve_gradient_bsde(sol, ens, spec, direction=[2.0])
    assert not dirn.full_jacobian
    assert dirn.y0 == pytest.approx(2.0 * full.y0[0], rel=1e-12)


def test_z_representation(smooth_case):
    spec, ens, sol = smooth_case
    check = check_z_representation(sol, solve_gradient_bsde(sol, ens, spec), ens, spec)
    assert check.ok and check.excluded_paths == 0
    # 8k paths: the last steps are noisy; the acceptance suite checks 2% at full size
    assert check.relative_l2 < 0.06
    assert np.nanmax(check.per_step[:10]) < 0.03


def test_gradient_bsde_needs_flow_and_smooth_payoff(smooth_case):
    spec, ens, sol = smooth_case
    bare = simulate_paths(spec, 0.0, [100.0], 2000, 20, seed=6)
    with pytest.raises(BsdeError, match="flow"):
        solve_gradient_bsde(solve_backward(bare, spec, Terminal.WITH_CLAIM), bare, spec)
    dspec = spec.with_payoff(payoffs.digital(100.0, 10.0))
    with pytest.raises(ValueError, match="not differentiable"):
        solve_gradient_bsde(solve_backward(ens, dspec, Terminal.WITH_CLAIM), ens, dspec)


def test_lipschitz_audit_accepts_smooth_and_flags_digital():
    spec = basis_risk_spec(SMOOTH)
    smooth = lipschitz_audit(spec, [[95.0], [105.0]], 4000, 20, seed=2)
    assert 0.9 <= smooth.slope <= 1.1 and smooth.accepted and not smooth.flags
    dig = lipschitz_audit(spec.with_payoff(payoffs.digital(100.0, 10.0)), [[100.0]], 4000, 20, seed=2)
    assert not dig.accepted
    assert any("not Lipschitz" in f for f in dig.flags)


def test_triangulation_gaps():
    tri = HedgeTriangulation(np.array([1.0, 2.0]), np.array([1.0, 2.1]), np.array([0.9, 2.0]))
    gaps = tri.pairwise_gaps()
    assert gaps["strategies~price_gradient"] == pytest.approx(0.1 / 2.1)
    assert gaps["strategies~gradient_bsde"] == pytest.approx(0.1 / 2.0)
    assert gaps["price_gradient~gradient_bsde"] == pytest.approx(0.1 / 2.1)
