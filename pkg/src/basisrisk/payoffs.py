"""Bounded terminal payoffs ``F: R^m -> R`` with optional gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


@dataclass(frozen=True)
class Payoff:
    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    bound: float
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    # twice differentiable everywhere; kinked payoffs are Lipschitz but not smooth
    smooth: bool = False
    lipschitz: bool = True
    cap: Optional[float] = None

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(np.atleast_2d(r)), dtype=float)

    @property
    def differentiable(self) -> bool:
        return self.grad is not None

    def gradient(self, r: np.ndarray) -> np.ndarray:
        if self.grad is None:
            raise ValueError(
                f"payoff {self.name!r} has no pathwise gradient; use bump-based gradients instead")
        return np.asarray(self.grad(np.atleast_2d(r)), dtype=float)

    def scaled(self, q: float) -> "Payoff":
        g = None if self.grad is None else (lambda r, g=self.grad: q * g(r))
        return Payoff(f"{q:g}*{self.name}", lambda r, f=self.fn: q * f(r), abs(q) * self.bound,
                      g, self.smooth, self.lipschitz, self.cap)

    def shifted(self, c: float) -> "Payoff":
        return Payoff(f"{self.name}+{c:g}", lambda r, f=self.fn: f(r) + c, self.bound + abs(c),
                      self.grad, self.smooth, self.lipschitz, self.cap)


def combine(a: float, fa: Payoff, b: float, fb: Payoff) -> Payoff:
    grad = None
    if fa.grad is not None and fb.grad is not None:
        grad = lambda r: a * fa.grad(r) + b * fb.grad(r)  # noqa: E731
    return Payoff(f"{a:g}*{fa.name}+{b:g}*{fb.name}", lambda r: a * fa.fn(r) + b * fb.fn(r),
                  abs(a) * fa.bound + abs(b) * fb.bound, grad,
                  fa.smooth and fb.smooth, fa.lipschitz and fb.lipschitz)


def zero() -> Payoff:
    return Payoff("zero", lambda r: np.zeros(len(r)), 0.0, lambda r: np.zeros_like(r), smooth=True)


def constant(c: float) -> Payoff:
    return Payoff(f"const({c:g})", lambda r: np.full(len(r), float(c)), abs(c),
                  lambda r: np.zeros_like(r), smooth=True)


def _unit(m_index: int, r: np.ndarray, values: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r)
    out[:, m_index] = values
    return out


def call(strike: float, cap: float, component: int = 0) -> Payoff:
    """``min((r_c - K)^+, cap)``; the cap restores boundedness."""
    if not cap > 0:
        raise ValueError("call payoff needs a positive cap")

    def fn(r):
        return np.clip(r[:, component] - strike, 0.0, cap)

    def grad(r):
        x = r[:, component]
        return _unit(component, r, ((x > strike) & (x < strike + cap)).astype(float))

    return Payoff(f"call({strike:g},cap={cap:g})", fn, cap, grad, cap=cap)


def put(strike: float, component: int = 0) -> Payoff:
    if strike <= 0:
        raise ValueError("put strike must be positive to keep the payoff bounded on r >= 0")

    def fn(r):
        return np.clip(strike - r[:, component], 0.0, strike)

    def grad(r):
        x = r[:, component]
        return _unit(component, r, -((x < strike) & (x > 0)).astype(float))

    return Payoff(f"put({strike:g})", fn, strike, grad, cap=strike)


def call_spread(low: float, high: float, component: int = 0) -> Payoff:
    """``(r_c - low)^+ - (r_c - high)^+``."""
    if not high > low:
        raise ValueError("call spread needs high > low")
    return Payoff(f"call_spread({low:g},{high:g})",
                  lambda r: np.clip(r[:, component] - low, 0.0, high - low), high - low,
                  lambda r: _unit(component, r, ((r[:, component] > low) & (r[:, component] < high)).astype(float)))


def spread_call(strike: float, cap: float, long: int = 1, short: int = 0, log_prices: bool = False) -> Payoff:
    """``min((x_long - x_short - K)^+, cap)`` with ``x = r`` or ``x = exp(r)``
    when the index holds log-prices."""
    if not cap > 0:
        raise ValueError("spread call needs a positive cap")
    level = np.exp if log_prices else (lambda v: v)

    def fn(r):
        return np.clip(level(r[:, long]) - level(r[:, short]) - strike, 0.0, cap)

    def grad(r):
        xl, xs = level(r[:, long]), level(r[:, short])
        x = xl - xs - strike
        live = ((x > 0) & (x < cap)).astype(float)
        g = np.zeros_like(r)
        g[:, long] = live * (xl if log_prices else 1.0)
        g[:, short] = -live * (xs if log_prices else 1.0)
        return g

    tag = "log_" if log_prices else ""
    return Payoff(f"{tag}spread_call({strike:g},cap={cap:g})", fn, cap, grad, cap=cap)


def digital(strike: float, payout: float = 1.0, component: int = 0) -> Payoff:
    return Payoff(f"digital({strike:g})", lambda r: payout * (r[:, component] > strike).astype(float),
                  abs(payout), None, lipschitz=False)


def polynomial(coeffs, lo: float, hi: float, component: int = 0) -> Payoff:
    """``sum_j c_j x^j`` evaluated at ``x = clip(r_c, lo, hi)``."""
    poly = np.polynomial.Polynomial(np.asarray(coeffs, dtype=float))
    dpoly = poly.deriv()
    if not hi > lo:
        raise ValueError("polynomial payoff needs hi > lo")
    xs = np.linspace(lo, hi, 2001)
    bound = float(np.max(np.abs(poly(xs))))

    def grad(r):
        x = r[:, component]
        inside = (x > lo) & (x < hi)
        return _unit(component, r, np.where(inside, dpoly(x), 0.0))

    return Payoff(f"poly{tuple(np.round(poly.coef, 6))}", lambda r: poly(np.clip(r[:, component], lo, hi)),
                  bound, grad)


def smooth_step(center: float, width: float, height: float = 1.0, component: int = 0) -> Payoff:
    """``height * (1 + tanh((r_c - center)/width)) / 2``, a C-infinity bounded payoff."""

    def fn(r):
        return 0.5 * height * (1.0 + np.tanh((r[:, component] - center) / width))

    def grad(r):
        s = 1.0 / np.cosh((r[:, component] - center) / width)
        return _unit(component, r, 0.5 * height * s * s / width)

    return Payoff(f"smooth_step({center:g},{width:g})", fn, abs(height), grad, smooth=True)
