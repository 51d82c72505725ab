"""Index and traded-asset dynamics, Euler path simulation and variational flows.

Coefficient callables are vectorised over paths: ``b(t, r)`` receives ``r`` of
shape ``(n, m)`` and returns ``(n, m)``; ``rho`` returns ``(n, m, d)``,
``alpha`` ``(n, k)`` and ``beta`` ``(n, k, d)``.  Optional analytic
derivatives follow the same convention with a trailing ``m`` axis holding
d/dr_l, e.g. ``drho(t, r)`` has shape ``(n, m, d, m)``.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .payoffs import Payoff

Coefficient = Callable[[float, np.ndarray], np.ndarray]

#: paths per counter-based RNG block; fixed so path i's draws never depend on
#: the total path count or on the worker count
BLOCK_SIZE = 1024
FD_REL_STEP = 1e-5
SINGULAR_DET = 1e-12


class SimulationError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


def worker_count() -> int:
    raw = os.environ.get("BASISRISK_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigurationError(f"BASISRISK_THREADS must be an integer, got {raw!r}")
    return os.cpu_count() or 1


def central_jacobian(fn: Coefficient, t: float, r: np.ndarray) -> np.ndarray:
    """Central-difference derivative of ``fn`` in r, appended as a last axis."""
    r = np.asarray(r, dtype=float)
    n, m = r.shape
    cols = []
    for l in range(m):
        step = FD_REL_STEP * (1.0 + np.abs(r[:, l]))
        up = r.copy()
        dn = r.copy()
        up[:, l] += step
        dn[:, l] -= step
        diff = np.asarray(fn(t, up)) - np.asarray(fn(t, dn))
        cols.append(diff / (2.0 * step).reshape((n,) + (1,) * (diff.ndim - 1)))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class MarketSpec:
    """Index dynamics ``dR = b dt + rho dW`` plus ``k`` assets with returns
    ``alpha dt + beta dW``, an exponential-utility investor with risk
    aversion ``eta`` and a bounded claim ``F(R_T)``."""

    m: int
    k: int
    d: int
    b: Coefficient
    rho: Coefficient
    alpha: Coefficient
    beta: Coefficient
    eta: float
    T: float
    F: Payoff
    db: Optional[Coefficient] = None
    drho: Optional[Coefficient] = None
    dalpha: Optional[Coefficient] = None
    dbeta: Optional[Coefficient] = None
    time_homogeneous: bool = False
    name: str = "custom"

    def __post_init__(self):
        if min(self.m, self.k, self.d) < 1:
            raise ConfigurationError("dimensions m, k, d must be positive")
        if self.d < self.k:
            raise ConfigurationError(f"need d >= k to exclude arbitrage, got d={self.d}, k={self.k}")
        if not self.eta > 0:
            raise ConfigurationError(f"risk aversion must be positive, got {self.eta}")
        if not self.T > 0:
            raise ConfigurationError(f"horizon must be positive, got {self.T}")

    def with_payoff(self, payoff: Payoff) -> "MarketSpec":
        return replace(self, F=payoff)

    def grad_b(self, t, r):
        return self.db(t, r) if self.db is not None else central_jacobian(self.b, t, r)

    def grad_rho(self, t, r):
        return self.drho(t, r) if self.drho is not None else central_jacobian(self.rho, t, r)

    def grad_alpha(self, t, r):
        return self.dalpha(t, r) if self.dalpha is not None else central_jacobian(self.alpha, t, r)

    def grad_beta(self, t, r):
        return self.dbeta(t, r) if self.dbeta is not None else central_jacobian(self.beta, t, r)


def check_assumptions(spec: MarketSpec, lattice: np.ndarray, times=None,
                      eps: float = 1e-8, big: float = 1e8) -> dict:
    """Sampled checks of ellipticity of beta beta^T and Lipschitz growth of b, rho.

    Raises ``ConfigurationError`` when beta beta^T leaves ``[eps, big]``; the
    Lipschitz constant estimate is returned for reporting.
    """
    lattice = np.atleast_2d(np.asarray(lattice, dtype=float))
    times = np.linspace(0.0, spec.T, 3) if times is None else np.asarray(times)
    lip = 0.0
    eig_lo, eig_hi = np.inf, 0.0
    for t in times:
        beta = np.asarray(spec.beta(t, lattice))
        eig = np.linalg.eigvalsh(beta @ np.swapaxes(beta, 1, 2))
        eig_lo = min(eig_lo, float(eig.min()))
        eig_hi = max(eig_hi, float(eig.max()))
        if len(lattice) > 1:
            b = np.asarray(spec.b(t, lattice)).reshape(len(lattice), -1)
            rho = np.asarray(spec.rho(t, lattice)).reshape(len(lattice), -1)
            dx = np.linalg.norm(lattice[1:] - lattice[:-1], axis=1)
            ok = dx > 0
            dc = (np.linalg.norm(b[1:] - b[:-1], axis=1)
                  + np.linalg.norm(rho[1:] - rho[:-1], axis=1))
            if ok.any():
                lip = max(lip, float(np.max(dc[ok] / dx[ok])))
    if eig_lo < eps or eig_hi > big:
        raise ConfigurationError(
            f"beta beta^T not uniformly elliptic on the lattice: eigenvalues in [{eig_lo:.3g}, {eig_hi:.3g}]")
    return {"min_eig": eig_lo, "max_eig": eig_hi, "lipschitz_estimate": lip}


@dataclass
class PathEnsemble:
    """Simulated index paths on a uniform grid.

    ``R`` has shape ``(n_paths, n_steps + 1, m)``, ``dW`` ``(n_paths, n_steps, d)``
    and, once flow tracking ran, ``Phi`` ``(n_paths, n_steps + 1, m, m)``.
    Path ``i`` draws from the counter-based stream ``(seed, i // BLOCK_SIZE)``
    at offset ``i % BLOCK_SIZE``.
    """

    times: np.ndarray
    R: np.ndarray
    dW: np.ndarray
    seed: int
    antithetic: bool = False
    Phi: Optional[np.ndarray] = None
    singular_flags: Optional[np.ndarray] = None

    @property
    def n_paths(self) -> int:
        return self.R.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dW.shape[1]

    @property
    def h(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def stream_ids(self) -> np.ndarray:
        idx = np.arange(self.n_paths)
        return np.stack([idx // BLOCK_SIZE, idx % BLOCK_SIZE], axis=1)

    def step_of(self, t: float) -> int:
        i = int(round((t - self.t0) / self.h))
        if i < 0 or i > self.n_steps or abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not on the simulation grid")
        return i


def _block_key(seed: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64)


def block_normals(seed: int, block: int, n_steps: int, d: int, antithetic: bool = False) -> np.ndarray:
    """Standard normals for one block of paths from a Philox stream keyed by
    ``seed`` with the block id in the high counter word."""
    counter = np.array([0, 0, 0, block], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(counter=counter, key=_block_key(seed)))
    if not antithetic:
        return gen.standard_normal((BLOCK_SIZE, n_steps, d))
    half = gen.standard_normal((BLOCK_SIZE // 2, n_steps, d))
    out = np.empty((BLOCK_SIZE, n_steps, d))
    out[0::2] = half
    out[1::2] = -half
    return out


def euler_paths(spec: MarketSpec, times: np.ndarray, r0: np.ndarray, dW: np.ndarray,
                path_offset: int = 0) -> np.ndarray:
    """Euler-Maruyama recursion on given Brownian increments."""
    n, N, _ = dW.shape
    R = np.empty((n, N + 1, spec.m))
    R[:, 0] = r0
    for i in range(N):
        t = times[i]
        x = R[:, i]
        drift = np.asarray(spec.b(t, x), dtype=float)
        vol = np.asarray(spec.rho(t, x), dtype=float)
        step = x + drift * (times[i + 1] - t) + np.einsum("nij,nj->ni", vol, dW[:, i])
        bad = ~np.isfinite(step).all(axis=1)
        if bad.any():
            j = int(np.argmax(bad))
            raise SimulationError(
                f"non-finite coefficient evaluation at t={t:.6g}, r={x[j].tolist()}, path {path_offset + j}")
        R[:, i + 1] = step
    return R


def simulate_paths(spec: MarketSpec, t0: float, r0, n_paths: int, n_steps: int, seed: int,
                   antithetic: bool = False, threads: Optional[int] = None) -> PathEnsemble:
    r0 = np.atleast_1d(np.asarray(r0, dtype=float))
    if r0.shape != (spec.m,):
        raise ValueError(f"r0 must have {spec.m} components")
    if not np.isfinite(r0).all():
        raise ValueError("r0 must be finite")
    if n_paths < 2 or n_steps < 1:
        raise ValueError("need n_paths >= 2 and n_steps >= 1")
    if antithetic and n_paths % 2:
        raise ValueError("antithetic sampling needs an even path count")
    if not 0 <= t0 < spec.T:
        raise ValueError(f"t0 must lie in [0, T), got {t0}")
    times = t0 + (spec.T - t0) * np.arange(n_steps + 1) / n_steps
    n_blocks = -(-n_paths // BLOCK_SIZE)

    def work(block):
        lo = block * BLOCK_SIZE
        hi = min(lo + BLOCK_SIZE, n_paths)
        z = block_normals(seed, block, n_steps, spec.d, antithetic)[: hi - lo]
        dW = z * np.sqrt(np.diff(times))[None, :, None]
        return dW, euler_paths(spec, times, r0, dW, path_offset=lo)

    threads = threads or worker_count()
    with ThreadPoolExecutor(max_workers=min(threads, n_blocks)) as pool:
        parts = list(pool.map(work, range(n_blocks)))
    dW = np.concatenate([p[0] for p in parts])
    R = np.concatenate([p[1] for p in parts])
    return PathEnsemble(times=times, R=R, dW=dW, seed=seed, antithetic=antithetic)


def coarsen(ensemble: PathEnsemble, spec: MarketSpec, factor: int) -> PathEnsemble:
    """Re-run Euler on a grid ``factor`` times coarser, summing the increments
    of the same Brownian paths."""
    N = ensemble.n_steps
    if N % factor:
        raise ValueError("factor must divide the step count")
    dW = ensemble.dW.reshape(ensemble.n_paths, N // factor, factor, -1).sum(axis=2)
    times = ensemble.times[::factor]
    R = euler_paths(spec, times, ensemble.R[0, 0], dW)
    return PathEnsemble(times=times, R=R, dW=dW, seed=ensemble.seed, antithetic=ensemble.antithetic)


def _flow_block(spec, times, R, dW):
    n, N, _ = dW.shape
    m = spec.m
    Phi = np.empty((n, N + 1, m, m))
    Phi[:, 0] = np.eye(m)
    for i in range(N):
        t = times[i]
        h = times[i + 1] - t
        jb = np.asarray(spec.grad_b(t, R[:, i]))          # (n, m, m)
        jr = np.asarray(spec.grad_rho(t, R[:, i]))        # (n, m, d, m)
        A = jb * h + np.einsum("nidl,nd->nil", jr, dW[:, i])
        Phi[:, i + 1] = Phi[:, i] + A @ Phi[:, i]
    return Phi


def simulate_flow(spec: MarketSpec, ensemble: PathEnsemble, threads: Optional[int] = None) -> PathEnsemble:
    """Populate the Jacobian flow ``Phi = dR/dr0`` along the existing paths."""
    n = ensemble.n_paths
    n_blocks = -(-n // BLOCK_SIZE)

    def work(block):
        sl = slice(block * BLOCK_SIZE, min((block + 1) * BLOCK_SIZE, n))
        return _flow_block(spec, ensemble.times, ensemble.R[sl], ensemble.dW[sl])

    threads = threads or worker_count()
    with ThreadPoolExecutor(max_workers=min(threads, n_blocks)) as pool:
        Phi = np.concatenate(list(pool.map(work, range(n_blocks))))
    det = np.abs(np.linalg.det(Phi))
    singular = (det < SINGULAR_DET).any(axis=1)
    if singular.any():
        warnings.warn(f"{int(singular.sum())} paths have a near-singular flow matrix", RuntimeWarning)
    return replace(ensemble, Phi=Phi, singular_flags=singular)


def malliavin_gradient(spec: MarketSpec, ensemble: PathEnsemble, theta_idx: int, s_idx: int) -> np.ndarray:
    """Per-path ``Phi_s Phi_theta^{-1} rho(t_theta, R_theta)`` of shape ``(n, m, d)``."""
    if ensemble.Phi is None:
        raise ValueError("flow matrices not populated; run simulate_flow first")
    if not 0 <= theta_idx <= s_idx <= ensemble.n_steps:
        raise ValueError("need 0 <= theta_idx <= s_idx <= n_steps")
    phi_theta = ensemble.Phi[:, theta_idx]
    det = np.abs(np.linalg.det(phi_theta))
    if (det < SINGULAR_DET).any():
        raise SimulationError(f"singular flow matrix on path {int(np.argmax(det < SINGULAR_DET))}")
    vol = np.asarray(spec.rho(ensemble.times[theta_idx], ensemble.R[:, theta_idx]))
    if theta_idx == s_idx:
        return vol.copy()
    return ensemble.Phi[:, s_idx] @ np.linalg.solve(phi_theta, vol)
