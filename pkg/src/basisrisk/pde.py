"""Explicit finite differences for the semilinear pricing PDE (m <= 2).

Solves ``u_t + L u = f(t, r, grad u . rho)``, ``u(T) = terminal``, with
``L = b . grad + 1/2 tr(rho rho^T Hess)``, backwards in time.  Boundary
nodes use linear extrapolation (vanishing second normal derivative).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import payoffs
from .bsde import Terminal
from .generator import driver, make_context
from .market import MarketSpec, simulate_paths
from .payoffs import Payoff

DOMAIN_SD = 6.0


class StabilityError(ValueError):
    def __init__(self, required_dt: float, given_dt: float):
        super().__init__(f"explicit scheme unstable: time step {given_dt:.3g} exceeds bound {required_dt:.3g}")
        self.required_dt = required_dt


@dataclass
class PdeGrid:
    lo: np.ndarray
    hi: np.ndarray
    n_nodes: int
    n_out_steps: int
    t0: float = 0.0
    dt: Optional[float] = None  # explicit time step; chosen from the stability bound if None

    @property
    def axes(self):
        return [np.linspace(l, h, self.n_nodes) for l, h in zip(self.lo, self.hi)]

    @property
    def dr(self) -> np.ndarray:
        return (np.asarray(self.hi) - np.asarray(self.lo)) / (self.n_nodes - 1)


def default_grid(spec: MarketSpec, r0, n_nodes: int = 201, n_out_steps: int = 50, t0: float = 0.0,
                 pilot_paths: int = 4096, seed: int = 20240101) -> PdeGrid:
    """Domain ``r0 +/- 6`` standard deviations of ``R_T``, estimated by a pilot simulation."""
    r0 = np.atleast_1d(np.asarray(r0, dtype=float))
    pilot = simulate_paths(spec, t0, r0, pilot_paths, max(n_out_steps, 1), seed)
    sd = pilot.R[:, -1].std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return PdeGrid(r0 - DOMAIN_SD * sd, r0 + DOMAIN_SD * sd, n_nodes, n_out_steps, t0)


@dataclass
class PdeSolution:
    """``u`` on the space grid at the output times (aligned with a BSDE grid)."""

    grid: PdeGrid
    times: np.ndarray
    u: np.ndarray          # (n_out + 1, n_nodes[, n_nodes])
    grad: np.ndarray       # (n_out + 1, n_nodes[, n_nodes], m)
    dt: float
    substeps: int

    def _interp(self, field, r):
        r = np.atleast_2d(np.asarray(r, dtype=float))
        axes = self.grid.axes
        if len(axes) == 1:
            if field.ndim == 1:
                return np.interp(r[:, 0], axes[0], field)
            return np.stack([np.interp(r[:, 0], axes[0], field[:, j]) for j in range(field.shape[1])], axis=1)
        interp = RegularGridInterpolator(axes, field, bounds_error=False, fill_value=None)
        return interp(r)

    def value_at(self, i: int, r) -> np.ndarray:
        return self._interp(self.u[i], r)

    def grad_at(self, i: int, r) -> np.ndarray:
        return self._interp(self.grad[i], r)


def _gradient(u, dr):
    if u.ndim == 1:
        return np.gradient(u, dr[0], edge_order=2)[:, None]
    g = np.gradient(u, *dr, edge_order=2)
    return np.stack(g, axis=-1)


def _extrapolate_edges(u):
    u[0] = 2 * u[1] - u[2]
    u[-1] = 2 * u[-2] - u[-3]
    if u.ndim == 2:
        u[:, 0] = 2 * u[:, 1] - u[:, 2]
        u[:, -1] = 2 * u[:, -2] - u[:, -3]


def _cell_average(payoff: Payoff, axes, dr, samples: int = 8):
    """Average the terminal payoff over each grid cell; keeps second-order
    convergence for kinked payoffs."""
    offs = (np.arange(samples) + 0.5) / samples - 0.5
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    shape = mesh.shape[:-1]
    pts = mesh.reshape(-1, len(axes))
    acc = np.zeros(len(pts))
    for shift in np.stack(np.meshgrid(*[offs] * len(axes), indexing="ij"), axis=-1).reshape(-1, len(axes)):
        acc += payoff(pts + shift * dr)
    return (acc / samples ** len(axes)).reshape(shape)


def pde_oracle(spec: MarketSpec, terminal: Terminal | Payoff, grid: PdeGrid,
               smooth_terminal: bool = True) -> PdeSolution:
    if spec.m > 2:
        raise ValueError("the finite-difference oracle supports m <= 2 only")
    if isinstance(terminal, Payoff):
        payoff = terminal
    elif terminal == Terminal.WITH_CLAIM:
        payoff = spec.F
    elif terminal == Terminal.ZERO_CLAIM:
        payoff = payoffs.zero()
    else:
        raise ValueError(f"unsupported terminal {terminal}")
    m = spec.m
    axes = grid.axes
    dr = grid.dr
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    shape = mesh.shape[:-1]
    pts = mesh.reshape(-1, m)

    def coefficients(t):
        b = np.asarray(spec.b(t, pts))
        rho = np.asarray(spec.rho(t, pts))
        a = rho @ np.swapaxes(rho, 1, 2)
        return b, rho, a, make_context(spec, t, pts)

    out_h = (spec.T - grid.t0) / grid.n_out_steps
    coef_T = coefficients(spec.T)
    a_max = float(np.max(np.abs(coef_T[2])))
    if not spec.time_homogeneous:
        a_max = max(a_max, float(np.max(np.abs(coefficients(grid.t0)[2]))))
    bound = float(np.min(dr) ** 2 / (2.0 * max(a_max, 1e-300) * m))
    if grid.dt is not None:
        if grid.dt > bound:
            raise StabilityError(bound, grid.dt)
        substeps = int(np.ceil(out_h / grid.dt - 1e-9))
    else:
        substeps = int(np.ceil(out_h / bound))
    dt = out_h / substeps
    if dt > bound * (1 + 1e-12):
        raise StabilityError(bound, dt)

    u = _cell_average(payoff, axes, dr) if smooth_terminal else payoff(pts).reshape(shape)
    n_out = grid.n_out_steps
    times = grid.t0 + out_h * np.arange(n_out + 1)
    U = np.empty((n_out + 1,) + shape)
    G = np.empty((n_out + 1,) + shape + (m,))
    U[n_out] = u
    G[n_out] = _gradient(u, dr).reshape(shape + (m,))
    cached = coef_T if spec.time_homogeneous else None
    inner = tuple(slice(1, -1) for _ in range(m))

    for j in range(n_out - 1, -1, -1):
        for s in range(substeps):
            t = times[j + 1] - s * dt
            b, rho, a, ctx = cached if cached is not None else coefficients(t)
            grads = np.zeros(shape + (m,))
            lu = np.zeros(shape)
            for l in range(m):
                sl_p = list(inner)
                sl_m = list(inner)
                sl_p[l] = slice(2, None)
                sl_m[l] = slice(None, -2)
                du = (u[tuple(sl_p)] - u[tuple(sl_m)]) / (2 * dr[l])
                d2 = (u[tuple(sl_p)] - 2 * u[inner] + u[tuple(sl_m)]) / dr[l] ** 2
                grads[inner + (l,)] = du
                lu[inner] += b.reshape(shape + (m,))[inner + (l,)] * du
                lu[inner] += 0.5 * a.reshape(shape + (m, m))[inner + (l, l)] * d2
            if m == 2:
                uxy = (u[2:, 2:] - u[2:, :-2] - u[:-2, 2:] + u[:-2, :-2]) / (4 * dr[0] * dr[1])
                lu[1:-1, 1:-1] += a.reshape(shape + (2, 2))[1:-1, 1:-1, 0, 1] * uxy
            z = np.einsum("nm,nmd->nd", grads.reshape(-1, m), rho)
            f = driver(ctx, z).reshape(shape)
            new = u + dt * (lu - f)
            _extrapolate_edges(new)
            u = new
        U[j] = u
        G[j] = _gradient(u, dr).reshape(shape + (m,))
    return PdeSolution(grid, times, U, G, dt, substeps)
