"""Closed-form Black-Scholes values (zero rate) used as independent oracles."""

from __future__ import annotations

import numpy as np
from scipy.stats import norm


def bs_call(s, strike, sigma, tau):
    s = np.asarray(s, dtype=float)
    if tau <= 0:
        return np.maximum(s - strike, 0.0)
    sd = sigma * np.sqrt(tau)
    d1 = np.log(s / strike) / sd + 0.5 * sd
    return s * norm.cdf(d1) - strike * norm.cdf(d1 - sd)


def bs_call_delta(s, strike, sigma, tau):
    s = np.asarray(s, dtype=float)
    sd = sigma * np.sqrt(tau)
    return norm.cdf(np.log(s / strike) / sd + 0.5 * sd)


def capped_call(s, strike, cap, sigma, tau):
    """``min((S - K)^+, cap)`` as a long/short pair of calls."""
    return bs_call(s, strike, sigma, tau) - bs_call(s, strike + cap, sigma, tau)


def capped_call_delta(s, strike, cap, sigma, tau):
    return bs_call_delta(s, strike, sigma, tau) - bs_call_delta(s, strike + cap, sigma, tau)


def call_spread(s, low, high, sigma, tau):
    return bs_call(s, low, sigma, tau) - bs_call(s, high, sigma, tau)


def call_spread_delta(s, low, high, sigma, tau):
    return bs_call_delta(s, low, sigma, tau) - bs_call_delta(s, high, sigma, tau)
