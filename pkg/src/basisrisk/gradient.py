"""Gradient BSDE for ``grad_x Y``, flow and bump cross-checks, and the Lipschitz audit.

The gradient equation is linear with slope ``grad_z f`` and source
``grad_x f . Phi`` evaluated on a base quadratic solve.  It is discretised
with the same sign convention as the base solver.  Regression is done in
state coordinates: with ``G_{i+1} = grad_x Y_{i+1} Phi_i^{-1}`` (the pathwise
derivative of ``Y_{i+1}`` with respect to ``R_i``)

    grad_r z_i = E[G_{i+1} dW_i | R_i] / h
    grad_r u_i = E[G_{i+1} | R_i] - h (grad_r f + grad_z f . grad_r z_i)
    grad_x Y_i = grad_r u_i Phi_i
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bsde import (BsdeError, BsdeSolution, Terminal, single_threaded_blas, solve_backward,
                   step_regression)
from .generator import driver_grad_r, driver_grad_z, make_context
from .market import MarketSpec, PathEnsemble, euler_paths, simulate_flow, simulate_paths
from .payoffs import Payoff
from .pricing import hedge_from_gradient, optimal_strategy
from .regression import RegressionBasis

LIPSCHITZ_MIN_SLOPE = 0.9
MAX_SINGULAR_FRACTION = 1e-3


@dataclass
class GradientSolution:
    """``dY`` is ``grad_x Y`` with shape ``(n, N + 1, m)`` and ``dZ`` is
    ``grad_x Z`` with shape ``(n, N, d, m)``; ``du`` holds ``grad_r u`` along the
    paths.  ``direction`` is set when a directional derivative was requested."""

    times: np.ndarray
    dY: np.ndarray
    dZ: np.ndarray
    du: np.ndarray
    direction: Optional[np.ndarray] = None

    @property
    def full_jacobian(self) -> bool:
        return self.direction is None

    @property
    def y0(self) -> np.ndarray:
        g = self.dY[:, 0].mean(axis=0)
        return g if self.direction is None else float(g @ self.direction)


def _inverse_flow(ensemble: PathEnsemble):
    if ensemble.Phi is None:
        raise BsdeError("the gradient BSDE needs flow matrices; run simulate_flow first")
    return np.linalg.inv(ensemble.Phi)


@single_threaded_blas
def solve_gradient_bsde(sol: BsdeSolution, ensemble: PathEnsemble, spec: MarketSpec,
                        basis: Optional[RegressionBasis] = None,
                        direction=None, z_method: str = "joint") -> GradientSolution:
    if sol.linear:
        raise BsdeError("the gradient BSDE linearises a quadratic solve")
    payoff: Payoff = sol.payoff
    if not payoff.differentiable:
        raise ValueError(f"payoff {payoff.name!r} is not differentiable; use bump_gradient instead")
    basis = basis or RegressionBasis()
    Phi = ensemble.Phi
    Phi_inv = _inverse_flow(ensemble)
    R, dW, times, h = ensemble.R, ensemble.dW, ensemble.times, ensemble.h
    n, N, d = dW.shape
    m = R.shape[2]
    du = np.empty((n, N + 1, m))
    dZ = np.empty((n, N, d, m))
    du[:, N] = payoff.gradient(R[:, N])
    dY = np.empty_like(du)
    dY[:, N] = np.einsum("nj,njl->nl", du[:, N], Phi[:, N])
    for i in range(N - 1, -1, -1):
        # pathwise derivative of Y_{i+1} with respect to R_i
        G = np.einsum("nj,njl->nl", dY[:, i + 1], Phi_inv[:, i])
        ls = basis.fit(R[:, i], step=i)
        cy, cz, _ = step_regression(ls, G, dW[:, i], h, z_method)
        cont = ls.fitted(cy)
        dz_r = ls.fitted(cz.reshape(len(cy), d * m)).reshape(n, d, m)
        t = times[i]
        ctx = make_context(spec, t, R[:, i])
        z = sol.Z[:, i]
        src = driver_grad_r(spec, t, R[:, i], z, ctx) + np.einsum("nd,ndm->nm", driver_grad_z(ctx, z), dz_r)
        du[:, i] = cont - h * src
        dY[:, i] = np.einsum("nj,njl->nl", du[:, i], Phi[:, i])
        dZ[:, i] = np.einsum("ndj,njl->ndl", dz_r, Phi[:, i])
        if not np.isfinite(du[:, i]).all():
            raise BsdeError(f"non-finite gradient values first appear at step {i}")
    if direction is not None:
        direction = np.asarray(direction, dtype=float).reshape(m)
    return GradientSolution(times, dY, dZ, du, direction)


@dataclass
class ZCheck:
    relative_l2: float
    per_step: np.ndarray
    excluded_paths: int
    excluded_fraction: float

    @property
    def ok(self) -> bool:
        return self.excluded_fraction <= MAX_SINGULAR_FRACTION


def check_z_representation(sol: BsdeSolution, grad: GradientSolution, ensemble: PathEnsemble,
                           spec: MarketSpec, trim: float = 0.01) -> ZCheck:
    """Relative L2 gap between regression ``Z_i`` and ``grad_r u(t_i, R_i) rho``,
    with ``grad_r u = grad_x Y_i Phi_i^{-1}``.  Steps 1..N-1 and, per step,
    paths inside the ``[trim, 1 - trim]`` quantile box of ``R_i`` are used;
    paths with a near-singular flow are excluded and counted."""
    flags = ensemble.singular_flags
    keep = np.ones(ensemble.n_paths, bool) if flags is None else ~np.asarray(flags)
    Phi_inv = _inverse_flow(ensemble)
    num = den = 0.0
    per_step = np.full(sol.n_steps, np.nan)
    for i in range(1, sol.n_steps):
        R = ensemble.R[:, i]
        lo, hi = np.quantile(R, [trim, 1 - trim], axis=0)
        mask = keep & ((R >= lo) & (R <= hi)).all(axis=1)
        gu = np.einsum("nj,njl->nl", grad.dY[mask, i], Phi_inv[mask, i])
        ref = np.einsum("nm,nmd->nd", gu, np.asarray(spec.rho(sol.times[i], R[mask])))
        gap = float(np.sum((sol.Z[mask, i] - ref) ** 2))
        size = float(np.sum(ref ** 2))
        num += gap
        den += size
        per_step[i] = np.sqrt(gap / size) if size > 0 else 0.0
    rel = float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))
    excluded = int((~keep).sum())
    return ZCheck(rel, per_step, excluded, excluded / ensemble.n_paths)


def flow_bump_check(spec: MarketSpec, ensemble: PathEnsemble, eps: float = 1e-4) -> float:
    """Max relative gap between ``Phi_T`` and the forward-difference
    ``(R_T^{r0 + eps e_j} - R_T^{r0}) / eps`` under the same increments."""
    if ensemble.Phi is None:
        ensemble = simulate_flow(spec, ensemble)
    r0 = ensemble.R[0, 0]
    base = ensemble.R[:, -1]
    worst = 0.0
    for j in range(len(r0)):
        shifted = r0.copy()
        shifted[j] += eps
        bumped = euler_paths(spec, ensemble.times, shifted, ensemble.dW)[:, -1]
        fd = (bumped - base) / eps
        phi = ensemble.Phi[:, -1, :, j]
        scale = np.maximum(np.abs(phi), 1e-12).max(axis=1, keepdims=True)
        worst = max(worst, float(np.max(np.abs(fd - phi) / scale)))
    return worst


def bump_gradient(spec: MarketSpec, r0, n_paths: int, n_steps: int, seed: int,
                  terminal: Terminal = Terminal.WITH_CLAIM, basis: Optional[RegressionBasis] = None,
                  rel_eps: float = 1e-3) -> np.ndarray:
    """``(Y_0(r0 + eps e_j) - Y_0(r0 - eps e_j)) / 2 eps`` with common random
    numbers and ``eps = rel_eps (1 + |r0_j|)``."""
    r0 = np.asarray(r0, dtype=float)
    out = np.empty(len(r0))
    for j in range(len(r0)):
        eps = rel_eps * (1.0 + abs(r0[j]))
        vals = []
        for sgn in (1.0, -1.0):
            x = r0.copy()
            x[j] += sgn * eps
            ens = simulate_paths(spec, 0.0, x, n_paths, n_steps, seed)
            vals.append(solve_backward(ens, spec, terminal, basis).y0)
        out[j] = (vals[0] - vals[1]) / (2 * eps)
    return out


@dataclass
class LipschitzReport:
    deltas: np.ndarray
    moments: np.ndarray
    slope: float
    accepted: bool
    flags: list = field(default_factory=list)


def lipschitz_audit(spec: MarketSpec, lattice, n_paths: int, n_steps: int, seed: int,
                    deltas=(0.01, 0.02, 0.04), basis: Optional[RegressionBasis] = None,
                    direction=None, relative: bool = True) -> LipschitzReport:
    """Fit the exponent of ``(E sup_i |Y_i^x - Y_i^{x'}|^2)^{1/2}`` against
    ``|x - x'|`` under common random numbers, averaged over the lattice.

    With ``relative`` the perturbation at ``x`` is ``delta`` times the
    standard deviation of ``R_T.e`` from ``x``, so it is a fixed fraction of
    the diffusion scale whatever the units of the coordinate; the exponent
    does not depend on this per-point factor.  A digital payoff only shows
    its square-root rate once enough paths cross the strike."""
    lattice = np.atleast_2d(np.asarray(lattice, dtype=float))
    m = lattice.shape[1]
    e = np.zeros(m)
    e[0] = 1.0
    if direction is not None:
        e = np.asarray(direction, dtype=float) / np.linalg.norm(direction)
    deltas = np.asarray(deltas, dtype=float)
    moments = np.zeros(len(deltas))
    for x in lattice:
        ens = simulate_paths(spec, 0.0, x, n_paths, n_steps, seed)
        base = solve_backward(ens, spec, Terminal.WITH_CLAIM, basis).Y
        scale = float(np.std(ens.R[:, -1] @ e)) if relative else 1.0
        scale = scale if scale > 0 else 1.0
        for k, dl in enumerate(deltas):
            step = dl * scale
            other = solve_backward(simulate_paths(spec, 0.0, x + step * e, n_paths, n_steps, seed), spec,
                                   Terminal.WITH_CLAIM, basis).Y
            sup = np.max(np.abs(other - base), axis=1)
            moments[k] += np.sqrt(np.mean(sup ** 2)) / len(lattice)
    if (moments == 0).all():
        return LipschitzReport(deltas, moments, float("inf"), True)
    slope = float(np.polyfit(np.log(deltas), np.log(np.maximum(moments, 1e-300)), 1)[0])
    accepted = slope >= LIPSCHITZ_MIN_SLOPE
    flags = []
    if not accepted:
        flags.append(f"fitted exponent {slope:.3f} < {LIPSCHITZ_MIN_SLOPE}: payoff smoothness "
                     "hypothesis violated, gradient outputs unreliable")
    if not spec.F.lipschitz:
        flags.append(f"payoff {spec.F.name!r} is not Lipschitz")
    return LipschitzReport(deltas, moments, slope, accepted, flags)


@dataclass
class HedgeTriangulation:
    via_strategies: np.ndarray
    via_price_gradient: np.ndarray
    via_gradient_bsde: np.ndarray

    def pairwise_gaps(self) -> dict:
        vals = {"strategies": self.via_strategies, "price_gradient": self.via_price_gradient,
                "gradient_bsde": self.via_gradient_bsde}
        names = list(vals)
        out = {}
        for a in range(3):
            for b in range(a + 1, 3):
                x, y = vals[names[a]], vals[names[b]]
                scale = max(np.max(np.abs(x)), np.max(np.abs(y)), 1e-12)
                out[f"{names[a]}~{names[b]}"] = float(np.max(np.abs(x - y)) / scale)
        return out


def hedge_triangulation(price, sol_with: BsdeSolution, sol_zero: BsdeSolution,
                        grad_with: GradientSolution, grad_zero: GradientSolution,
                        spec: MarketSpec, r0) -> HedgeTriangulation:
    """The derivative hedge at ``(t_0, r0)`` three ways: from the strategy
    difference, from the fitted price gradient, and from the gradient BSDEs."""
    r0 = np.atleast_2d(np.asarray(r0, dtype=float))
    t0 = float(sol_with.times[0])
    strat = optimal_strategy(sol_with, spec, t0, r0) - optimal_strategy(sol_zero, spec, t0, r0)
    from_price = hedge_from_gradient(spec, t0, r0, price.grad(0, r0))
    g = grad_zero.dY[:, 0].mean(axis=0) - grad_with.dY[:, 0].mean(axis=0)
    from_bsde = hedge_from_gradient(spec, t0, r0, g[None])
    return HedgeTriangulation(strat[0], from_price[0], from_bsde[0])
