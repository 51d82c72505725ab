"""JSON run configuration.

A config names a built-in scenario (with optional parameter overrides) or
gives an inline market, plus a payoff, solver settings, oracle toggles and
an output directory.  Unknown keys are rejected everywhere.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import scenarios
from .regression import RegressionBasis


class ConfigError(ValueError):
    """Parse or validation failure; ``problems`` lists every violation."""

    def __init__(self, message: str, problems: Optional[list] = None):
        self.problems = problems or [message]
        super().__init__(message if not problems else message + "\n" + "\n".join(f"  - {p}" for p in problems))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# -- payoffs ----------------------------------------------------------------------

class CallPayoff(_Strict):
    type: Literal["call"]
    strike: float
    cap: Optional[float] = Field(None, gt=0)
    component: int = Field(0, ge=0)


class PutPayoff(_Strict):
    type: Literal["put"]
    strike: float
    component: int = Field(0, ge=0)


class CallSpreadPayoff(_Strict):
    type: Literal["call-spread"]
    low: float
    high: float
    component: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _ordered(self):
        if not self.low < self.high:
            raise ValueError("call-spread needs low < high")
        return self


class SpreadCallPayoff(_Strict):
    type: Literal["spread-call"]
    strike: float
    cap: Optional[float] = Field(None, gt=0)
    long: int = Field(1, ge=0)
    short: int = Field(0, ge=0)
    log_prices: bool = False


class DigitalPayoff(_Strict):
    type: Literal["digital"]
    strike: float
    payout: float = 1.0
    component: int = Field(0, ge=0)


class ConstantPayoff(_Strict):
    type: Literal["constant"]
    value: float = 0.0


class PolynomialPayoff(_Strict):
    """``sum_j coeffs[j] x^j`` with ``x`` clamped to ``[lo, hi]`` (bounded by construction)."""

    type: Literal["polynomial"]
    coeffs: list[float] = Field(min_length=1)
    lo: float
    hi: float
    component: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _ordered(self):
        if not self.lo < self.hi:
            raise ValueError("polynomial payoff needs lo < hi")
        return self


class SmoothStepPayoff(_Strict):
    type: Literal["smooth-step"]
    center: float
    width: float = Field(gt=0)
    height: float = 1.0
    component: int = Field(0, ge=0)


PayoffConfig = Annotated[Union[CallPayoff, PutPayoff, CallSpreadPayoff, SpreadCallPayoff, DigitalPayoff,
                               ConstantPayoff, PolynomialPayoff, SmoothStepPayoff], Field(discriminator="type")]


# -- market -----------------------------------------------------------------------

class IndexConfig(_Strict):
    kind: Literal["constant", "linear", "geometric"]
    drift: list[float]
    vol: list[list[float]]
    mean_reversion: Optional[list[list[float]]] = None

    @model_validator(mode="after")
    def _shapes(self):
        m = len(self.drift)
        if len(self.vol) != m or len({len(row) for row in self.vol}) != 1:
            raise ValueError(f"vol must be a rectangular {m} x d matrix")
        if self.kind == "linear":
            A = self.mean_reversion
            if A is None or len(A) != m or any(len(row) != m for row in A):
                raise ValueError(f"linear index needs an {m} x {m} mean_reversion matrix")
        elif self.mean_reversion is not None:
            raise ValueError("mean_reversion is only used by the linear index kind")
        return self


class AssetConfig(_Strict):
    alpha: list[float]
    beta: list[list[float]]

    @model_validator(mode="after")
    def _shapes(self):
        if len(self.beta) != len(self.alpha) or len({len(row) for row in self.beta}) != 1:
            raise ValueError("beta must be a rectangular k x d matrix with k = len(alpha)")
        return self


class MarketConfig(_Strict):
    index: IndexConfig
    assets: AssetConfig
    eta: float = Field(gt=0)
    T: float = Field(gt=0)
    r0: list[float]

    @model_validator(mode="after")
    def _dims(self):
        m, d = len(self.index.drift), len(self.index.vol[0])
        k, d_assets = len(self.assets.alpha), len(self.assets.beta[0])
        problems = []
        if d_assets != d:
            problems.append(f"index has {d} Brownian factors but beta has {d_assets} columns")
        if k > d:
            problems.append(f"need d >= k, got k={k}, d={d}")
        if len(self.r0) != m:
            problems.append(f"r0 must have {m} components")
        if problems:
            raise ValueError("; ".join(problems))
        return self


# -- solver / oracles / output -------------------------------------------------------

class BasisConfig(_Strict):
    family: Literal["local", "polynomial"] = "local"
    degree: int = Field(3, ge=0, le=12)
    knots: Optional[int] = Field(None, ge=2)
    order: Literal[1, 2] = 2
    spacing: Literal["probit", "quantile"] = "probit"

    def build(self) -> RegressionBasis:
        return RegressionBasis(degree=self.degree, family=self.family, knots=self.knots, order=self.order,
                               spacing=self.spacing)


class SolverConfig(_Strict):
    n_paths: int = Field(50_000, ge=2)
    n_steps: int = Field(50, ge=1)
    seed: int = Field(1, ge=0)
    basis: BasisConfig = BasisConfig()
    z_method: Literal["joint", "projection"] = "joint"
    q_step: float = Field(0.05, gt=0, le=0.5)


class OracleConfig(_Strict):
    pde: bool = False
    pde_nodes: Optional[int] = Field(None, ge=11)
    gradient: bool = False
    mup_checks: bool = False


class ReportConfig(_Strict):
    """Where the hedge report is evaluated: ``r0`` at ``t = 0`` plus the given
    quantiles of the simulated state at each listed time fraction."""

    time_fractions: list[float] = [0.25, 0.5, 0.75]
    quantiles: list[float] = [0.1, 0.5, 0.9]
    plot_points: int = Field(41, ge=2)

    @field_validator("time_fractions", "quantiles")
    @classmethod
    def _unit(cls, v):
        if any(not 0 <= x < 1 for x in v):
            raise ValueError("entries must lie in [0, 1)")
        return v


class ScenarioConfig(_Strict):
    scenario: Optional[str] = None
    params: dict[str, Union[float, list[float]]] = {}
    market: Optional[MarketConfig] = None
    payoff: Optional[PayoffConfig] = None
    solver: SolverConfig = SolverConfig()
    oracles: OracleConfig = OracleConfig()
    report: ReportConfig = ReportConfig()
    out_dir: str = "out"

    @model_validator(mode="after")
    def _source(self):
        if (self.scenario is None) == (self.market is None):
            raise ValueError("give exactly one of 'scenario' (a built-in id) or 'market' (inline coefficients)")
        if self.scenario is not None:
            if self.scenario not in scenarios.BUILTIN_DEFAULTS:
                raise ValueError(f"unknown scenario {self.scenario!r}; choose from "
                                 f"{sorted(scenarios.BUILTIN_DEFAULTS)}")
            unknown = set(self.params) - set(scenarios.BUILTIN_DEFAULTS[self.scenario])
            if unknown:
                raise ValueError(f"unknown parameters for {self.scenario}: {sorted(unknown)}")
        elif self.params:
            raise ValueError("'params' only applies to built-in scenarios")
        if self.market is not None and self.payoff is None:
            raise ValueError("an inline market needs a payoff")
        return self

    # -- resolution ------------------------------------------------------------

    def payoff_dict(self) -> dict:
        if self.payoff is not None:
            return self.payoff.model_dump()
        if self.scenario is None:
            raise ConfigError("an inline market needs a payoff")
        return dict(scenarios.DEFAULT_PAYOFFS[self.scenario])

    def build(self):
        """Market with payoff attached, start state, and provenance notes."""
        if self.scenario is not None:
            sc = scenarios.builtin(self.scenario, self.params)
            spec, r0, notes = sc.spec, sc.r0, list(sc.notes)
        else:
            mk = self.market
            m, k, d = len(mk.index.drift), len(mk.assets.alpha), len(mk.index.vol[0])
            spec = scenarios.build_spec(m, k, d, mk.index.kind, mk.index.drift, mk.index.vol, mk.assets.alpha,
                                        mk.assets.beta, mk.eta, mk.T, scenarios.placeholder_payoff(m),
                                        mean_reversion=mk.index.mean_reversion, name="inline")
            r0 = np.asarray(mk.r0, dtype=float)
            notes = []
        cfg = self.payoff_dict()
        for key in ("component", "long", "short"):
            if key in cfg and cfg[key] >= spec.m:
                raise ConfigError(f"payoff {key} index {cfg[key]} out of range for m={spec.m}")
        payoff, filled = scenarios.make_payoff(cfg, spec, r0)
        if "cap" in filled:
            notes.append(f"payoff capped at {filled['cap']!r} to keep it bounded")
        return spec.with_payoff(payoff), r0, notes

    def digest(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _format_errors(err: ValidationError) -> list:
    out = []
    for e in err.errors():
        where = ".".join(str(p) for p in e["loc"]) or "<root>"
        out.append(f"{where}: {e['msg']}")
    return out


def parse_config(text: str, source: str = "<string>") -> ScenarioConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    try:
        return ScenarioConfig.model_validate(raw)
    except ValidationError as exc:
        problems = _format_errors(exc)
        raise ConfigError(f"{source}: {len(problems)} validation error(s)", problems) from None


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
