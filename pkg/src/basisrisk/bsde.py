"""Least-squares regression Monte Carlo for the backward equations.

Sign convention: the equations read ``Y_s = xi - int_s^T Z dW - int_s^T f ds``,
i.e. ``dY = Z dW + f ds``.  The driver is therefore *subtracted* in the
recursion, the opposite of the more common ``+ int f ds`` convention:

    Z_i = Reg[(Y_{i+1} - Reg[Y_{i+1} | R_i]) dW_i | R_i] / h
    Y_i = Reg[Y_{i+1} | R_i] - h f(t_i, R_i, Z_i)

Centring ``Y_{i+1}`` before multiplying by ``dW_i`` leaves the conditional
expectation unchanged and removes most of its variance.
"""

from __future__ import annotations

import csv
import enum
import functools
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_triangular
from threadpoolctl import threadpool_limits

from . import payoffs
from .generator import driver, driver_grad_r, driver_grad_z, make_context
from .market import MarketSpec, PathEnsemble, simulate_paths
from .payoffs import Payoff
from .regression import Features, LeastSquares, RegressionBasis, scaled_penalty, solve_gram

MIN_PATHS_PER_BASIS = 20


class BsdeError(RuntimeError):
    pass


class Terminal(str, enum.Enum):
    WITH_CLAIM = "WITH_CLAIM"
    ZERO_CLAIM = "ZERO_CLAIM"
    MUP = "MUP"
    GRADIENT = "GRADIENT"


def single_threaded_blas(fn):
    """Pin BLAS to one thread so reductions, and hence outputs, do not depend
    on the host's thread count."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with threadpool_limits(limits=1, user_api="blas"):
            return fn(*args, **kwargs)

    return wrapper


@dataclass
class StepFit:
    features: Features
    y_coef: np.ndarray      # (p,)
    z_coef: np.ndarray      # (p, d)
    r_factor: np.ndarray    # upper Cholesky factor of the design Gram matrix
    resid_var: float        # residual variance of this step's value regression
    path_var: float         # variance of the residuals summed from this step to maturity

    def stderr(self, r) -> np.ndarray:
        """Standard error of the fitted value: residual variance times leverage.

        At a degenerate step the fitted constant equals the mean of
        ``Y_N - sum (Z dW + h f)`` over paths, so the variance of the residuals
        summed to maturity is used instead of this step's alone.
        """
        x = self.features.design(r)
        s = solve_triangular(self.r_factor, x.T, trans="T")
        var = self.path_var if self.features.degenerate else self.resid_var
        return np.sqrt(var * np.einsum("pn,pn->n", s, s))


@dataclass
class BsdeSolution:
    """Discrete solution on a path ensemble plus the fitted step functions.

    ``Y`` has shape ``(n, N + 1)``; ``Z`` has shape ``(n, N, d)``.  For a
    quadratic solve the fitted value at ``(t_i, r)`` is
    ``c_i(r) - h f(t_i, r, v_i(r))`` with ``c_i``, ``v_i`` the regressed
    continuation and control polynomials.
    """

    spec: MarketSpec
    times: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    fits: list
    tag: Terminal
    payoff: Payoff
    z_max: Optional[float]
    clip_count: int = 0
    slope_fn: Optional[Callable] = None
    degree_reductions: list = field(default_factory=list)
    jitter_used: bool = False
    anchor_grad: Optional[np.ndarray] = None  # (m,) gradient at a degenerate first step

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def h(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def linear(self) -> bool:
        return self.tag in (Terminal.MUP, Terminal.GRADIENT)

    @property
    def y0(self) -> float:
        return float(np.mean(self.Y[:, 0]))

    @property
    def clip_fraction(self) -> float:
        return self.clip_count / self.Z.shape[0] / max(self.Z.shape[1], 1)

    def _check_step(self, i):
        if not 0 <= i <= self.n_steps:
            raise IndexError(f"step {i} outside 0..{self.n_steps}")

    def continuation_at(self, i: int, r) -> np.ndarray:
        fit = self.fits[i]
        return fit.features.design(r) @ fit.y_coef

    def z_at(self, i: int, r) -> np.ndarray:
        self._check_step(i)
        if i == self.n_steps:
            raise IndexError("no control at the terminal step")
        fit = self.fits[i]
        z = fit.features.design(r) @ fit.z_coef
        return _clip(z, self.z_max)[0]

    def value_at(self, i: int, r) -> np.ndarray:
        """Fitted ``u(t_i, r)``; at a degenerate step (all paths at one state)
        this is only meaningful at that state."""
        self._check_step(i)
        r = np.atleast_2d(np.asarray(r, dtype=float))
        if i == self.n_steps:
            return self.payoff(r)
        z = self.z_at(i, r)
        cont = self.continuation_at(i, r)
        t = self.times[i]
        if self.linear:
            if self.slope_fn is None:
                raise BsdeError("off-path evaluation of a linear solve needs slope_fn")
            return cont - self.h * np.einsum("nd,nd->n", self.slope_fn(i, r), z)
        return cont - self.h * driver(make_context(self.spec, t, r), z)

    def grad_at(self, i: int, r) -> np.ndarray:
        """``grad_r u(t_i, r)`` from the fitted polynomials, shape ``(n, m)``.

        A degenerate step (all paths at one state) carries no spatial
        information.  At the first step the one-step chain rule through the
        next fit is used (see ``anchor_gradient``); elsewhere the next
        step's gradient stands in, an O(h) approximation in time.
        """
        self._check_step(i)
        if self.linear:
            raise BsdeError("spatial gradients are provided for quadratic solves only")
        r = np.atleast_2d(np.asarray(r, dtype=float))
        if i == self.n_steps:
            return self.payoff.gradient(r)
        fit = self.fits[i]
        if fit.features.degenerate:
            if i == 0 and self.anchor_grad is not None:
                return np.tile(self.anchor_grad, (len(r), 1))
            return self.grad_at(i + 1, r)
        t = self.times[i]
        dx = fit.features.design_grad(r)                       # (n, p, m)
        dcont = np.einsum("npm,p->nm", dx, fit.y_coef)
        dz = np.einsum("npm,pd->ndm", dx, fit.z_coef)          # (n, d, m)
        z = self.z_at(i, r)
        ctx = make_context(self.spec, t, r)
        gz = driver_grad_z(ctx, z)
        gr = driver_grad_r(self.spec, t, r, z, ctx)
        return dcont - self.h * (gr + np.einsum("nd,ndm->nm", gz, dz))

    def stderr_at(self, i: int, r) -> np.ndarray:
        return self.fits[i].stderr(r)


def _clip(z, z_max):
    if z_max is None:
        return z, 0
    norm = np.linalg.norm(z, axis=1)
    over = norm > z_max
    if over.any():
        z = z.copy()
        z[over] *= (z_max / norm[over])[:, None]
    return z, int(over.sum())


def _require_paths(ensemble: PathEnsemble, basis: RegressionBasis, m: int):
    need = basis.size(m) * MIN_PATHS_PER_BASIS
    if ensemble.n_paths < need:
        raise BsdeError(f"need at least {need} paths for a {basis.describe()} basis, got {ensemble.n_paths}")


def step_regression(ls: LeastSquares, target: np.ndarray, dW_i: np.ndarray, h: float,
                    z_method: str = "joint"):
    """Coefficients of ``E[target | R_i]`` and ``E[target dW_i | R_i] / h``.

    ``target`` is ``(n, q)``.  Returns ``(y_coef (p, q), z_coef (p, d, q),
    resid (n, q))``.

    ``projection``: ``Reg[(target - Reg[target]) dW] / h``.
    ``joint``: one least-squares fit of ``target`` on ``[phi, phi dW_1, ..,
    phi dW_d]``; the ``phi dW`` block has the same population coefficient
    as the projection estimator but the martingale part of the target is
    absorbed exactly, leaving far less noise.
    """
    p = ls.features.size
    n, d = dW_i.shape
    q = target.shape[1]
    if z_method == "projection":
        cy = ls.coef(target)
        resid = target - ls.fitted(cy)
        cz = ls.coef((dW_i[:, :, None] * resid[:, None, :]).reshape(n, d * q)) / h
        return cy, cz.reshape(p, d, q), resid
    if z_method != "joint":
        raise ValueError(f"unknown z_method {z_method!r}")
    X = ls.X
    blocks = [X] + [X * dW_i[:, j:j + 1] for j in range(d)]
    pen = scaled_penalty(blocks, ls.features.penalty_matrix(), ls.smoothing)
    aug = LeastSquares(ls.features, np.concatenate(blocks, axis=1), solve_gram(np.concatenate(blocks, axis=1), pen),
                       pen, ls.smoothing)
    if aug.r is None:
        raise BsdeError("joint value/control design is rank deficient")
    coef = aug.coef(target)
    resid = target - aug.fitted(coef)
    return coef[:p], coef[p:].reshape(d, p, q).transpose(1, 0, 2), resid


def _backward(ensemble, spec, terminal_values, step_driver, basis, z_max, tag, payoff, z_method):
    R, dW, times = ensemble.R, ensemble.dW, ensemble.times
    n, N, d = dW.shape
    h = ensemble.h
    Y = np.empty((n, N + 1))
    Z = np.empty((n, N, d))
    Y[:, N] = terminal_values
    fits = [None] * N
    clips = 0
    jitter = False
    start = len(basis.reductions)
    acc = np.zeros(n)
    for i in range(N - 1, -1, -1):
        ls = basis.fit(R[:, i], step=i)
        cy, cz, resid = step_regression(ls, Y[:, i + 1, None], dW[:, i], h, z_method)
        cy, cz, resid = cy[:, 0], cz[:, :, 0], resid[:, 0]
        cont = ls.fitted(cy)
        z, c = _clip(ls.fitted(cz), z_max)
        clips += c
        g, jit = step_driver(i, R[:, i], z)
        jitter |= jit
        y = cont - h * g
        if not (np.isfinite(y).all() and np.isfinite(z).all()):
            raise BsdeError(f"non-finite values first appear at step {i} (t={times[i]:.6g})")
        Y[:, i] = y
        Z[:, i] = z
        dof = max(n - ls.features.size * (1 + (d if z_method == "joint" else 0)), 1)
        acc += resid
        fits[i] = StepFit(ls.features, cy, cz, ls.r, float(resid @ resid) / dof,
                          float(np.var(acc)) * n / dof)
    return BsdeSolution(spec, times, Y, Z, fits, tag, payoff, z_max, clips,
                        degree_reductions=basis.reductions[start:], jitter_used=jitter)


@single_threaded_blas
def solve_backward(ensemble: PathEnsemble, spec: MarketSpec, terminal: Terminal = Terminal.WITH_CLAIM,
                   basis: Optional[RegressionBasis] = None, z_method: str = "joint") -> BsdeSolution:
    """Solve the quadratic BSDE with terminal ``F(R_T)`` (WITH_CLAIM) or 0 (ZERO_CLAIM)."""
    basis = basis or RegressionBasis()
    _require_paths(ensemble, basis, spec.m)
    if terminal == Terminal.WITH_CLAIM:
        payoff = spec.F
    elif terminal == Terminal.ZERO_CLAIM:
        payoff = payoffs.zero()
    else:
        raise ValueError(f"solve_backward handles WITH_CLAIM and ZERO_CLAIM, not {terminal}")
    z_max = (2.0 * payoff.bound + 1.0) / np.sqrt(ensemble.h)
    times = ensemble.times

    def step_driver(i, r, z):
        ctx = make_context(spec, times[i], r)
        return driver(ctx, z), ctx.jitter_used

    sol = _backward(ensemble, spec, payoff(ensemble.R[:, -1]), step_driver, basis, z_max, terminal, payoff,
                    z_method)
    if sol.fits[0].features.degenerate and sol.n_steps > 1 and not sol.fits[1].features.degenerate:
        sol.anchor_grad = anchor_gradient(sol, ensemble)
    return sol


def anchor_gradient(sol: BsdeSolution, ensemble: PathEnsemble) -> np.ndarray:
    """Gradient at the common start state by the one-step chain rule.

    With every path starting at ``r0`` the step-0 fit is a constant, so
    its gradient comes from differentiating
    ``u(t_0, r0) = E[u(t_1, R_1)] - h f(t_0, r0, Z_0)`` with
    ``Z_0 = E[u(t_1, R_1) dW_0] / h``.  The fitted step-1 gradient is
    averaged over the step-1 cross-section, which is far less noisy than
    reading it off at the single point ``r0``.
    """
    spec, h = sol.spec, sol.h
    t0 = sol.times[0]
    r0 = ensemble.R[:1, 0]
    dW0 = ensemble.dW[:, 0]
    jb = np.asarray(spec.grad_b(t0, r0))[0]                   # (m, m)
    jr = np.asarray(spec.grad_rho(t0, r0))[0]                 # (m, d, m)
    phi = np.eye(spec.m) + h * jb + np.einsum("ajc,nj->nac", jr, dW0)
    g1 = np.einsum("na,nac->nc", sol.grad_at(1, ensemble.R[:, 1]), phi)
    dcont = g1.mean(axis=0)
    dz = np.einsum("nc,nj->jc", g1, dW0) / (len(g1) * h)      # (d, m)
    z0 = sol.Z[:1, 0]
    ctx = make_context(spec, t0, r0)
    gz = driver_grad_z(ctx, z0)[0]
    gr = driver_grad_r(spec, t0, r0, z0, ctx)[0]
    return dcont - h * (gr + gz @ dz)


def driver_slope(sol: BsdeSolution, ensemble: PathEnsemble) -> np.ndarray:
    """``grad_z f(t_i, R_i, Z_i)`` along the paths of a quadratic solve, ``(n, N, d)``."""
    out = np.empty_like(sol.Z)
    for i in range(sol.n_steps):
        ctx = make_context(sol.spec, sol.times[i], ensemble.R[:, i])
        out[:, i] = driver_grad_z(ctx, sol.Z[:, i])
    return out


def slope_function(sol: BsdeSolution) -> Callable:
    """Off-path version of :func:`driver_slope` using the fitted controls."""

    def fn(i, r):
        r = np.atleast_2d(r)
        return driver_grad_z(make_context(sol.spec, sol.times[i], r), sol.z_at(i, r))

    return fn


@single_threaded_blas
def solve_linear_bsde(ensemble: PathEnsemble, spec: MarketSpec, terminal: Payoff, slope: np.ndarray,
                      basis: Optional[RegressionBasis] = None, slope_fn: Optional[Callable] = None,
                      tag: Terminal = Terminal.MUP, z_method: str = "joint") -> BsdeSolution:
    """Solve ``U_s = F - int V dW - int slope.V ds`` by the same regression scheme."""
    basis = basis or RegressionBasis()
    _require_paths(ensemble, basis, spec.m)
    slope = np.asarray(slope, dtype=float)
    if slope.shape != ensemble.dW.shape:
        raise ValueError(f"slope must have shape {ensemble.dW.shape}, got {slope.shape}")

    def step_driver(i, r, v):
        return np.einsum("nd,nd->n", slope[:, i], v), False

    sol = _backward(ensemble, spec, terminal(ensemble.R[:, -1]), step_driver, basis, None, tag, terminal,
                    z_method)
    sol.slope_fn = slope_fn
    return sol


def write_solution_csv(sol: BsdeSolution, path, paths: Optional[int] = None) -> None:
    """Columns ``step, time, path, Y, Z_1..Z_d``; ``Z`` is empty at the terminal step."""
    n = sol.Y.shape[0] if paths is None else min(paths, sol.Y.shape[0])
    d = sol.Z.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "time", "path", "Y"] + [f"Z_{j + 1}" for j in range(d)])
        for i in range(sol.n_steps + 1):
            t = repr(float(sol.times[i]))
            for p in range(n):
                z = [repr(float(v)) for v in sol.Z[p, i]] if i < sol.n_steps else [""] * d
                w.writerow([i, t, p, repr(float(sol.Y[p, i]))] + z)


@dataclass
class DpPoint:
    state: np.ndarray
    fitted: float
    resolved: float
    stderr: float

    @property
    def z(self) -> float:
        return (self.fitted - self.resolved) / self.stderr


@dataclass
class DpReport:
    step: int
    points: list

    @property
    def rms_z(self) -> float:
        return float(np.sqrt(np.mean([p.z ** 2 for p in self.points])))

    @property
    def ok(self) -> bool:
        return self.rms_z <= 2.0


def split_ensemble(ensemble: PathEnsemble, n_batches: int) -> list:
    """Disjoint interleaved path subsets of an ensemble."""
    return [replace(ensemble, R=ensemble.R[b::n_batches], dW=ensemble.dW[b::n_batches],
                    Phi=None if ensemble.Phi is None else ensemble.Phi[b::n_batches], singular_flags=None)
            for b in range(n_batches)]


def dynamic_programming_check(sol: BsdeSolution, ensemble: PathEnsemble, step: int, n_paths: int, seed: int,
                              quantiles=(0.25, 0.5, 0.75), basis: Optional[RegressionBasis] = None,
                              n_batches: int = 5) -> DpReport:
    """Re-solve from ``(t_step, x)`` on fresh sub-paths for states ``x`` at the
    given quantiles of ``R_step`` and compare with the full solve's fitted
    ``u(t_step, x)``.

    The fitted value's standard error comes from re-fitting on ``n_batches``
    disjoint path subsets (spread / sqrt(n_batches)), which includes noise
    carried back from later steps; the re-solve's comes from its summed
    residuals.  The check passes when the root-mean-square scaled gap is at
    most 2."""
    if not 0 < step < sol.n_steps:
        raise ValueError("step must be strictly inside the grid")
    spec = sol.spec
    terminal = sol.tag
    if terminal not in (Terminal.WITH_CLAIM, Terminal.ZERO_CLAIM):
        raise ValueError("the check applies to quadratic solves")
    states = np.quantile(ensemble.R[:, step], quantiles, axis=0)
    batch_fits = np.array([solve_backward(part, spec, terminal, basis).value_at(step, states)
                           for part in split_ensemble(ensemble, n_batches)])
    se_fit = batch_fits.std(axis=0, ddof=1) / np.sqrt(n_batches)
    points = []
    for k, x in enumerate(states):
        sub = simulate_paths(spec, float(sol.times[step]), x, n_paths, sol.n_steps - step, seed + k)
        again = solve_backward(sub, spec, terminal, basis)
        se = float(np.hypot(se_fit[k], again.stderr_at(0, x[None])[0]))
        points.append(DpPoint(x, float(sol.value_at(step, x[None])[0]), again.y0, se))
    return DpReport(step, points)
