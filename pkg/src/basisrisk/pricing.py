"""Indifference prices, optimal strategies, derivative hedges and marginal utility prices.

Sign conventions
----------------
``p = u - u_hat``, the zero-claim value minus the with-claim value.  For a
claim paying a constant ``c`` this gives ``p = -c``; ``-p`` is reported
alongside as the buyer-style price.  The marginal utility price is reported
with the sign of the linear BSDE solution ``U`` (so a constant claim ``c``
has MUP ``c``), which equals ``-dp/dq`` at ``q = 0`` in the ``p = u - u_hat``
convention.
"""

from __future__ import annotations

import csv
import enum
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bsde import (BsdeSolution, Terminal, driver_slope, slope_function, solve_backward,
                   solve_linear_bsde)
from .generator import make_context, project
from .market import MarketSpec, PathEnsemble, simulate_paths
from .regression import RegressionBasis


class Source(str, enum.Enum):
    REGRESSION = "REGRESSION"
    PDE = "PDE"


class GridMismatchError(ValueError):
    pass


def step_index(times: np.ndarray, t: float) -> int:
    h = times[1] - times[0]
    i = int(round((t - times[0]) / h))
    if not 0 <= i < len(times) or abs(times[i] - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"time {t} is not on the solution grid")
    return i


@dataclass
class PriceField:
    """``p(t_i, r) = u(t_i, r) - u_hat(t_i, r)`` and its gradient in ``r``.

    Regression fields differentiate the fitted polynomials analytically; PDE
    fields use central differences on the grid.
    """

    with_claim: object
    zero_claim: object
    source: Source
    eta: float
    times: np.ndarray

    def step(self, t: float) -> int:
        return step_index(self.times, t)

    def p(self, i: int, r) -> np.ndarray:
        return np.asarray(self.zero_claim.value_at(i, r)) - np.asarray(self.with_claim.value_at(i, r))

    def buyer_price(self, i: int, r) -> np.ndarray:
        return -self.p(i, r)

    def grad(self, i: int, r) -> np.ndarray:
        return np.asarray(self.zero_claim.grad_at(i, r)) - np.asarray(self.with_claim.grad_at(i, r))


def indifference_price(sol_with, sol_zero) -> PriceField:
    if isinstance(sol_with, BsdeSolution) != isinstance(sol_zero, BsdeSolution):
        raise GridMismatchError("cannot mix regression and PDE solutions")
    if len(sol_with.times) != len(sol_zero.times) or not np.allclose(sol_with.times, sol_zero.times):
        raise GridMismatchError("solutions live on different time grids")
    if isinstance(sol_with, BsdeSolution):
        if sol_with.Y.shape != sol_zero.Y.shape:
            raise GridMismatchError("solutions come from different ensembles")
        return PriceField(sol_with, sol_zero, Source.REGRESSION, sol_with.spec.eta, sol_with.times)
    if sol_with.u.shape != sol_zero.u.shape:
        raise GridMismatchError("PDE solutions use different space grids")
    return PriceField(sol_with, sol_zero, Source.PDE, float("nan"), sol_with.times)


def strategy_from_z(spec: MarketSpec, t: float, r, z) -> np.ndarray:
    """``pi`` with ``pi beta = Proj_C[z + theta/eta]``, i.e. ``gamma beta^T (beta beta^T)^{-1}``."""
    ctx = make_context(spec, t, r)
    gamma = project(ctx, np.atleast_2d(z) + ctx.theta / ctx.eta)
    return np.einsum("nd,ndk->nk", gamma, ctx.pseudo)


def optimal_strategy(sol: BsdeSolution, spec: MarketSpec, t: float, r) -> np.ndarray:
    i = step_index(sol.times, t)
    r = np.atleast_2d(np.asarray(r, dtype=float))
    return strategy_from_z(spec, t, r, sol.z_at(i, r))


def derivative_hedge(price: PriceField, spec: MarketSpec, t: float, r) -> np.ndarray:
    """``-grad_r p . rho . beta^T (beta beta^T)^{-1}``; note it does not involve eta."""
    i = price.step(t)
    r = np.atleast_2d(np.asarray(r, dtype=float))
    return hedge_from_gradient(spec, t, r, price.grad(i, r))


def hedge_from_gradient(spec: MarketSpec, t: float, r, grad_p) -> np.ndarray:
    r = np.atleast_2d(np.asarray(r, dtype=float))
    rho = np.asarray(spec.rho(t, r))
    ctx = make_context(spec, t, r)
    exposure = np.einsum("nm,nmd->nd", np.atleast_2d(grad_p), rho)
    return -np.einsum("nd,ndk->nk", exposure, ctx.pseudo)


# -- marginal utility price ----------------------------------------------------

def girsanov_weights(sol_zero: BsdeSolution, ensemble: PathEnsemble, form: str = "log") -> np.ndarray:
    """Discrete density of the measure under which ``W + int grad_z f ds`` is a
    Brownian motion.

    ``log``: ``exp(-sum slope.dW - 1/2 sum |slope|^2 h)``; ``product``:
    ``prod (1 - slope.dW)``, which reproduces the regression recursion exactly
    but may go negative, in which case the log form is used with a warning.
    """
    slope = driver_slope(sol_zero, ensemble)
    incr = np.einsum("nid,nid->ni", slope, ensemble.dW)
    if form == "product":
        w = np.prod(1.0 - incr, axis=1)
        if (w >= 0).all():
            return w
        warnings.warn("negative product-form Girsanov weights; switching to log form", RuntimeWarning)
    elif form != "log":
        raise ValueError(f"unknown weight form {form!r}")
    quad = np.einsum("nid,nid->n", slope, slope) * ensemble.h
    return np.exp(-incr.sum(axis=1) - 0.5 * quad)


def girsanov_mup(sol_zero: BsdeSolution, ensemble: PathEnsemble, spec: MarketSpec,
                 form: str = "log") -> float:
    if sol_zero.tag != Terminal.ZERO_CLAIM:
        raise ValueError("the Girsanov representation uses the zero-claim solution")
    w = girsanov_weights(sol_zero, ensemble, form)
    return float(np.mean(w * spec.F(ensemble.R[:, -1])))


def mup_linear(sol_zero: BsdeSolution, ensemble: PathEnsemble, spec: MarketSpec,
               basis: Optional[RegressionBasis] = None) -> BsdeSolution:
    """Linear BSDE for the marginal utility price; ``U_0`` is the MUP at the start state."""
    return solve_linear_bsde(ensemble, spec, spec.F, driver_slope(sol_zero, ensemble), basis,
                             slope_fn=slope_function(sol_zero), tag=Terminal.MUP)


def mup_by_bump(spec: MarketSpec, ensemble: PathEnsemble, basis: Optional[RegressionBasis] = None,
                q_step: float = 0.05) -> float:
    """Central difference in the claim quantity with common random numbers:
    ``(u_hat(q) - u_hat(-q)) / 2q = -(p(q) - p(-q)) / 2q``."""
    if not 0 < q_step <= 0.5:
        raise ValueError("q_step must lie in (0, 0.5]")
    up = solve_backward(ensemble, spec.with_payoff(spec.F.scaled(q_step)), Terminal.WITH_CLAIM, basis)
    dn = solve_backward(ensemble, spec.with_payoff(spec.F.scaled(-q_step)), Terminal.WITH_CLAIM, basis)
    return (up.y0 - dn.y0) / (2.0 * q_step)


@dataclass
class Estimate:
    value: float
    stderr: float


def mup_triangulation(spec: MarketSpec, r0, n_paths: int, n_steps: int, seed: int,
                      basis: Optional[RegressionBasis] = None, n_batches: int = 8,
                      q_step: float = 0.05) -> dict:
    """Linear-BSDE, Girsanov and bump MUP estimates with batch-means standard errors.

    Each batch is an independent ensemble; the spread of the batch estimates
    gives an honest error bar that includes regression noise.
    """
    per = n_paths // n_batches
    rows = []
    for b in range(n_batches):
        ens = simulate_paths(spec, 0.0, r0, per, n_steps, seed + 7919 * (b + 1))
        zero = solve_backward(ens, spec, Terminal.ZERO_CLAIM, basis)
        rows.append((mup_linear(zero, ens, spec, basis).y0,
                     girsanov_mup(zero, ens, spec),
                     mup_by_bump(spec, ens, basis, q_step)))
    rows = np.array(rows)
    se = rows.std(axis=0, ddof=1) / np.sqrt(n_batches)
    names = ("linear", "girsanov", "bump")
    return {k: Estimate(float(rows[:, j].mean()), float(se[j])) for j, k in enumerate(names)}


# -- hedge report ----------------------------------------------------------------

@dataclass
class HedgeReport:
    t: np.ndarray
    r: np.ndarray
    p: np.ndarray
    grad_p: np.ndarray
    pi: np.ndarray
    pihat: np.ndarray
    delta: np.ndarray
    mup: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def header(self):
        m, k = self.r.shape[1], self.pi.shape[1]
        return (["t"] + [f"r_{j + 1}" for j in range(m)] + ["p"] + [f"grad_p_{j + 1}" for j in range(m)]
                + [f"pi_{j + 1}" for j in range(k)] + [f"pihat_{j + 1}" for j in range(k)]
                + [f"delta_{j + 1}" for j in range(k)] + ["mup"])

    def rows(self):
        for i in range(len(self.t)):
            vals = ([self.t[i]] + list(self.r[i]) + [self.p[i]] + list(self.grad_p[i]) + list(self.pi[i])
                    + list(self.pihat[i]) + list(self.delta[i]) + [self.mup[i]])
            yield [repr(float(v)) for v in vals]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            w.writerows(self.rows())


def hedge_report(price: PriceField, sol_with: BsdeSolution, sol_zero: BsdeSolution, spec: MarketSpec,
                 points, mup_sol: Optional[BsdeSolution] = None) -> HedgeReport:
    """Evaluate prices, strategies, hedges and MUP at ``points``, a list of
    ``(step, r)`` pairs.  ``delta`` is ``pihat - pi``."""
    cols = {k: [] for k in ("t", "r", "p", "g", "pi", "pihat", "mup")}
    for i, r in points:
        r = np.atleast_2d(np.asarray(r, dtype=float))
        t = float(price.times[i])
        cols["t"].append(np.full(len(r), t))
        cols["r"].append(r)
        cols["p"].append(price.p(i, r))
        cols["g"].append(price.grad(i, r))
        if i < sol_with.n_steps:
            cols["pi"].append(optimal_strategy(sol_zero, spec, t, r))
            cols["pihat"].append(optimal_strategy(sol_with, spec, t, r))
        else:
            nan = np.full((len(r), spec.k), np.nan)
            cols["pi"].append(nan)
            cols["pihat"].append(nan)
        if mup_sol is None:
            cols["mup"].append(np.full(len(r), np.nan))
        else:
            cols["mup"].append(mup_sol.value_at(i, r))
    cat = {k: np.concatenate(v) for k, v in cols.items()}
    return HedgeReport(cat["t"], cat["r"], cat["p"], cat["g"], cat["pi"], cat["pihat"],
                       cat["pihat"] - cat["pi"], cat["mup"])


def hedge_pnl(price: PriceField, spec: MarketSpec, ensemble: PathEnsemble) -> dict:
    """Variance of ``F(R_T)`` against ``F(R_T) - sum Delta (alpha h + beta dW)``
    along the simulated paths, rebalancing at every grid step."""
    R, dW, times = ensemble.R, ensemble.dW, ensemble.times
    h = ensemble.h
    gains = np.zeros(ensemble.n_paths)
    for i in range(ensemble.n_steps):
        t = times[i]
        x = R[:, i]
        delta = hedge_from_gradient(spec, t, x, price.grad(i, x))
        ret = np.asarray(spec.alpha(t, x)) * h + np.einsum("nkd,nd->nk", np.asarray(spec.beta(t, x)), dW[:, i])
        gains += np.einsum("nk,nk->n", delta, ret)
    payoff = spec.F(R[:, -1])
    unhedged = float(np.var(payoff))
    hedged = float(np.var(payoff - gains))
    return {"unhedged_var": unhedged, "hedged_var": hedged,
            "ratio": hedged / unhedged if unhedged > 0 else 0.0}
