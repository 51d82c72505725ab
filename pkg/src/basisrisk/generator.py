"""Quadratic driver of the utility-maximisation BSDE.

With ``theta = beta^T (beta beta^T)^{-1} alpha`` and ``P`` the orthogonal
projector onto the row space of ``beta`` (the attainable exposures), the
driver is

    f(t, r, z) = z.theta + |theta|^2 / (2 eta) - (eta / 2) |(I - P)(z + theta / eta)|^2.

All functions are batched: arrays carry a leading path/point axis ``n``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .market import MarketSpec

MAX_CONDITION = 1e12
JITTER = 1e-12


class EllipticityError(ValueError):
    pass


@dataclass
class DriverContext:
    theta: np.ndarray      # (n, d)
    beta: np.ndarray       # (n, k, d)
    P: np.ndarray          # (n, d, d)
    pseudo: np.ndarray     # beta^T (beta beta^T)^{-1}, (n, d, k)
    eta: float
    jitter_used: bool = False


def _gram_inverse(beta: np.ndarray):
    gram = beta @ np.swapaxes(beta, 1, 2)
    eig = np.linalg.eigvalsh(gram)
    cond = eig[:, -1] / np.maximum(eig[:, 0], np.finfo(float).tiny)
    if (eig[:, 0] <= 0).any() or (cond > MAX_CONDITION).any():
        worst = float(np.max(np.where(eig[:, 0] > 0, cond, np.inf)))
        raise EllipticityError(f"beta beta^T is not uniformly elliptic (condition number {worst:.3g})")
    k = gram.shape[-1]
    jitter = False
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        jitter = True
        chol = np.linalg.cholesky(gram + JITTER * np.eye(k))
    eye = np.broadcast_to(np.eye(k), gram.shape)
    linv = np.linalg.solve(chol, eye)
    return np.swapaxes(linv, 1, 2) @ linv, jitter


def context_from(alpha: np.ndarray, beta: np.ndarray, eta: float) -> DriverContext:
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    n = len(beta)
    if n > 1 and (beta == beta[:1]).all() and (alpha == alpha[:1]).all():
        one = context_from(alpha[:1], beta[:1], eta)
        return DriverContext(*(np.broadcast_to(a, (n,) + a.shape[1:]) for a in
                               (one.theta, one.beta, one.P, one.pseudo)), eta, one.jitter_used)
    inv, jitter = _gram_inverse(beta)
    pseudo = np.swapaxes(beta, 1, 2) @ inv
    theta = np.einsum("ndk,nk->nd", pseudo, alpha)
    P = pseudo @ beta
    return DriverContext(theta, beta, P, pseudo, eta, jitter)


def make_context(spec: MarketSpec, t: float, r) -> DriverContext:
    r = np.atleast_2d(np.asarray(r, dtype=float))
    return context_from(spec.alpha(t, r), spec.beta(t, r), spec.eta)


def project(ctx: DriverContext, z) -> np.ndarray:
    """Orthogonal projection of row vectors ``z`` onto span of the rows of beta."""
    z = np.atleast_2d(z)
    return np.einsum("nd,nde->ne", z, ctx.P)


def _residual(ctx: DriverContext, z: np.ndarray) -> np.ndarray:
    w = z + ctx.theta / ctx.eta
    return w - project(ctx, w)


def driver(ctx: DriverContext, z) -> np.ndarray:
    z = np.atleast_2d(z)
    th = ctx.theta
    res = _residual(ctx, z)
    return (np.einsum("nd,nd->n", z, th) + np.einsum("nd,nd->n", th, th) / (2 * ctx.eta)
            - 0.5 * ctx.eta * np.einsum("nd,nd->n", res, res))


def driver_grad_z(ctx: DriverContext, z) -> np.ndarray:
    """``theta - eta (I - P)(z + theta/eta)``."""
    z = np.atleast_2d(z)
    return ctx.theta - ctx.eta * _residual(ctx, z)


def growth_constant(ctx: DriverContext) -> float:
    """A constant ``c`` with ``|f(z)| <= c (1 + |z|^2)`` on this context."""
    th = float(np.max(np.linalg.norm(ctx.theta, axis=1)))
    eta = ctx.eta
    # |z.th| <= (|z|^2 + th^2)/2 ; |res|^2 <= 2|z|^2 + 2 th^2/eta^2
    return max(0.5 + eta, 0.5 * th ** 2 + th ** 2 / (2 * eta) + th ** 2 / eta)


def _context_derivatives(spec: MarketSpec, t: float, r: np.ndarray, ctx: DriverContext):
    """d theta / d r_l and d P / d r_l, shapes ``(n, d, m)`` and ``(n, d, d, m)``."""
    alpha = np.asarray(spec.alpha(t, r))
    dalpha = np.asarray(spec.grad_alpha(t, r))   # (n, k, m)
    dbeta = np.asarray(spec.grad_beta(t, r))     # (n, k, d, m)
    beta = ctx.beta
    inv = np.linalg.inv(beta @ np.swapaxes(beta, 1, 2))
    A_alpha = np.einsum("nij,nj->ni", inv, alpha)             # (n, k)
    A_beta = np.einsum("nij,njd->nid", inv, beta)             # (n, k, d)
    dtheta = (np.einsum("nkdl,nk->ndl", dbeta, A_alpha)
              + np.einsum("nkd,nkl->ndl", A_beta, dalpha))
    # d(beta beta^T) = dbeta beta^T + beta dbeta^T
    dgram = np.einsum("nidl,njd->nijl", dbeta, beta)
    dgram = dgram + np.swapaxes(dgram, 1, 2)
    dtheta -= np.einsum("nid,nijl,nj->ndl", A_beta, dgram, A_alpha)
    dP = np.einsum("nkdl,nke->ndel", dbeta, A_beta)
    dP = dP + np.swapaxes(dP, 1, 2)
    dP -= np.einsum("nid,nijl,nje->ndel", A_beta, dgram, A_beta)
    return dtheta, dP


def driver_grad_r(spec: MarketSpec, t: float, r, z, ctx: DriverContext | None = None) -> np.ndarray:
    """Gradient of ``f(t, r, z)`` in ``r`` at fixed ``z``, shape ``(n, m)``."""
    r = np.atleast_2d(np.asarray(r, dtype=float))
    z = np.atleast_2d(z)
    ctx = ctx if ctx is not None else make_context(spec, t, r)
    dtheta, dP = _context_derivatives(spec, t, r, ctx)
    eta = ctx.eta
    w = z + ctx.theta / eta
    res = w - project(ctx, w)
    return (np.einsum("nd,ndl->nl", z, dtheta)
            + np.einsum("nd,ndl->nl", ctx.theta, dtheta) / eta
            - np.einsum("nd,ndl->nl", res, dtheta)
            + eta * np.einsum("nd,ndel,ne->nl", res, dP, w))
