"""Coefficient families, payoff construction and the built-in scenario library.

Built-in parameter values are illustrative, not calibrated to any market.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import payoffs
from .market import MarketSpec, simulate_paths
from .payoffs import Payoff

CAP_MULTIPLE = 10.0
CAP_QUANTILE = 0.999


def _const(value, n_shape):
    value = np.asarray(value, dtype=float)

    def fn(t, r):
        return np.broadcast_to(value, (len(r),) + value.shape).copy()

    def grad(t, r):
        return np.zeros((len(r),) + value.shape + (n_shape,))

    return fn, grad


def index_coefficients(kind: str, drift, vol, mean_reversion=None):
    """``(b, rho, db, drho)`` for one of the supported index families.

    ``geometric``: ``b = r * drift``, ``rho = diag(r) vol``;
    ``constant``: ``b = drift``, ``rho = vol``;
    ``linear``: ``b = drift + A r``, ``rho = vol``.
    """
    drift = np.asarray(drift, dtype=float)
    vol = np.atleast_2d(np.asarray(vol, dtype=float))
    m = len(drift)
    if vol.shape[0] != m:
        raise ValueError(f"vol must have {m} rows, got shape {vol.shape}")
    if kind == "geometric":
        def b(t, r):
            return r * drift

        def rho(t, r):
            return r[:, :, None] * vol[None]

        def db(t, r):
            return np.broadcast_to(np.diag(drift), (len(r), m, m)).copy()

        def drho(t, r):
            out = np.zeros((len(r), m, vol.shape[1], m))
            for i in range(m):
                out[:, i, :, i] = vol[i]
            return out

        return b, rho, db, drho
    if kind == "constant":
        b, db = _const(drift, m)
        rho, drho = _const(vol, m)
        return b, rho, db, drho
    if kind == "linear":
        A = np.asarray(mean_reversion, dtype=float).reshape(m, m)

        def b(t, r):
            return drift + r @ A.T

        def db(t, r):
            return np.broadcast_to(A, (len(r), m, m)).copy()

        rho, drho = _const(vol, m)
        return b, rho, db, drho
    raise ValueError(f"unknown coefficient kind {kind!r}")


def build_spec(m, k, d, index_kind, drift, vol, alpha, beta, eta, T, payoff: Payoff,
               mean_reversion=None, name="custom") -> MarketSpec:
    b, rho, db, drho = index_coefficients(index_kind, drift, vol, mean_reversion)
    alpha = np.asarray(alpha, dtype=float).reshape(k)
    beta = np.asarray(beta, dtype=float).reshape(k, d)
    a_fn, da = _const(alpha, m)
    b_fn, dbeta = _const(beta, m)
    if np.asarray(vol).shape != (m, d):
        raise ValueError(f"vol must have shape ({m}, {d})")
    return MarketSpec(m=m, k=k, d=d, b=b, rho=rho, alpha=a_fn, beta=b_fn, eta=float(eta), T=float(T),
                      F=payoff, db=db, drho=drho, dalpha=da, dbeta=dbeta, time_homogeneous=True, name=name)


@dataclass
class Scenario:
    name: str
    spec: MarketSpec
    r0: np.ndarray
    params: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)


BUILTIN_DEFAULTS = {
    # seasonal drift/vol are placeholders; a real run sets them per season
    "weather-chdd": dict(r0=100.0, a1=0.02, a2=0.25, beta1=0.12, beta2=0.16, alpha=0.03, eta=0.1, T=1.0),
    "complete-market-bs": dict(r0=100.0, mu=0.05, sigma=0.2, eta=0.1, T=1.0),
    "crack-spread": dict(r0=[float(np.log(60.0)), float(np.log(70.0))],
                         gamma1=0.3, gamma2=0.25, gamma3=0.15, gamma4=0.1,
                         beta1=0.28, beta2=0.12, b=[0.0, 0.0], alpha=[0.04, 0.03], eta=0.1, T=0.5),
}

DEFAULT_PAYOFFS = {
    "weather-chdd": {"type": "call-spread", "low": 100.0, "high": 130.0},
    "complete-market-bs": {"type": "call", "strike": 100.0},
    "crack-spread": {"type": "spread-call", "strike": 10.0, "log_prices": True},
}


def placeholder_payoff(m):
    return payoffs.zero()


def builtin(name: str, params: Optional[dict] = None) -> Scenario:
    """Market and start state of a built-in scenario; the payoff is attached later."""
    if name not in BUILTIN_DEFAULTS:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(BUILTIN_DEFAULTS)}")
    p = dict(BUILTIN_DEFAULTS[name])
    unknown = set(params or {}) - set(p)
    if unknown:
        raise ValueError(f"unknown parameters for {name}: {sorted(unknown)}")
    p.update(params or {})
    notes = ["illustrative parameters, not calibrated"]
    if name == "weather-chdd":
        spec = build_spec(1, 1, 2, "geometric", [p["a1"]], [[p["a2"], 0.0]], [p["alpha"]],
                          [[p["beta1"], p["beta2"]]], p["eta"], p["T"], placeholder_payoff(1), name=name)
        r0 = np.array([p["r0"]], dtype=float)
    elif name == "complete-market-bs":
        spec = build_spec(1, 1, 1, "geometric", [p["mu"]], [[p["sigma"]]], [p["mu"]], [[p["sigma"]]],
                          p["eta"], p["T"], placeholder_payoff(1), name=name)
        r0 = np.array([p["r0"]], dtype=float)
    else:
        g1, g2, g3, g4 = p["gamma1"], p["gamma2"], p["gamma3"], p["gamma4"]
        vol = [[g1, 0.0, 0.0], [g2, g3, g4]]
        beta = [[g1, 0.0, 0.0], [p["beta1"], p["beta2"], 0.0]]
        spec = build_spec(2, 2, 3, "constant", p["b"], vol, p["alpha"], beta, p["eta"], p["T"],
                          placeholder_payoff(2), name=name)
        r0 = np.array(p["r0"], dtype=float)
        notes.append("index coordinates are log-prices (crude, kerosene); assets are crude and heating oil")
    return Scenario(name, spec, r0, p, notes)


def default_cap(spec: MarketSpec, r0, payoff_cfg: dict, seed: int = 7, n_paths: int = 8192) -> float:
    """``CAP_MULTIPLE`` times the 99.9% quantile of the payoff's terminal underlying."""
    ens = simulate_paths(spec, 0.0, r0, n_paths, 16, seed)
    RT = ens.R[:, -1]
    kind = payoff_cfg["type"]
    if kind == "spread-call":
        lvl = np.exp(RT) if payoff_cfg.get("log_prices") else RT
        x = lvl[:, payoff_cfg.get("long", 1)] - lvl[:, payoff_cfg.get("short", 0)]
    else:
        x = RT[:, payoff_cfg.get("component", 0)]
    return float(CAP_MULTIPLE * np.quantile(np.abs(x), CAP_QUANTILE))


def make_payoff(cfg: dict, spec: Optional[MarketSpec] = None, r0=None) -> tuple[Payoff, dict]:
    """Build a payoff from its config dict; returns the payoff and what was
    filled in (e.g. an automatic cap)."""
    cfg = dict(cfg)
    kind = cfg.pop("type")
    filled = {}
    if kind in ("call", "spread-call") and cfg.get("cap") is None:
        if spec is None:
            raise ValueError(f"{kind} payoff needs an explicit cap or a market to derive one")
        cfg["cap"] = default_cap(spec, r0, {"type": kind, **cfg})
        filled["cap"] = cfg["cap"]
    if kind == "call":
        return payoffs.call(cfg["strike"], cfg["cap"], cfg.get("component", 0)), filled
    if kind == "put":
        return payoffs.put(cfg["strike"], cfg.get("component", 0)), filled
    if kind == "call-spread":
        return payoffs.call_spread(cfg["low"], cfg["high"], cfg.get("component", 0)), filled
    if kind == "spread-call":
        return payoffs.spread_call(cfg["strike"], cfg["cap"], cfg.get("long", 1), cfg.get("short", 0),
                                   cfg.get("log_prices", False)), filled
    if kind == "digital":
        return payoffs.digital(cfg["strike"], cfg.get("payout", 1.0), cfg.get("component", 0)), filled
    if kind == "constant":
        return payoffs.constant(cfg.get("value", 0.0)), filled
    if kind == "polynomial":
        return payoffs.polynomial(cfg["coeffs"], cfg["lo"], cfg["hi"], cfg.get("component", 0)), filled
    if kind == "smooth-step":
        return payoffs.smooth_step(cfg["center"], cfg["width"], cfg.get("height", 1.0),
                                   cfg.get("component", 0)), filled
    raise ValueError(f"unknown payoff type {kind!r}")
