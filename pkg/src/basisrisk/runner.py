"""Run orchestration: simulate, solve, price, hedge, check, export."""

from __future__ import annotations

import csv
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .bsde import Terminal, dynamic_programming_check, solve_backward, write_solution_csv
from .config import ScenarioConfig
from .generator import growth_constant, make_context
from .gradient import (bump_gradient, check_z_representation, flow_bump_check, hedge_triangulation,
                       lipschitz_audit, solve_gradient_bsde)
from .market import check_assumptions, simulate_flow, simulate_paths, worker_count
from .pde import default_grid, pde_oracle
from .pricing import (HedgeReport, derivative_hedge, hedge_report, indifference_price, mup_linear,
                      mup_triangulation)

COMMANDS = ("price", "hedge", "mup", "verify", "compare")
MAX_CLIP_FRACTION = 1e-3
HEDGE_EQUIVALENCE_TOL = 0.02
TRIANGULATION_TOL = 0.03
BUMP_GRADIENT_TOL = 0.02
FLOW_TOL = 1e-3
COMPARE_TOL = 0.01
DEFAULT_PDE_NODES = {1: 201, 2: 161}


class UnsupportedOracleError(ValueError):
    pass


@dataclass
class Check:
    name: str
    ok: bool
    detail: str


@dataclass
class RunReport:
    command: str
    scenario: str
    r0: np.ndarray
    summary: dict
    hedge: Optional[HedgeReport]
    checks: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    files: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def exit_code(self) -> int:
        return 0 if self.ok else 2

    def add(self, name: str, ok: bool, detail: str) -> None:
        self.checks.append(Check(name, bool(ok), detail))

    def text(self) -> str:
        lines = [f"basisrisk {self.command}: scenario {self.scenario}", ""]
        lines.append("provenance")
        lines += [f"  {k}: {v}" for k, v in self.provenance.items()]
        if self.notes:
            lines.append("notes")
            lines += [f"  {n}" for n in self.notes]
        lines.append("summary")
        lines += [f"  {k}: {_fmt(v)}" for k, v in self.summary.items()]
        if self.diagnostics:
            lines.append("diagnostics")
            lines += [f"  {k}: {_fmt(v)}" for k, v in self.diagnostics.items()]
        lines.append("checks")
        lines += [f"  [{'PASS' if c.ok else 'FAIL'}] {c.name}: {c.detail}" for c in self.checks]
        lines.append(f"result: {'all checks passed' if self.ok else 'invariant failure'}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, np.ndarray):
        return "[" + ", ".join(f"{x:.6g}" for x in v.ravel()) + "]"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _provenance(cfg: ScenarioConfig) -> dict:
    return {"config_hash": cfg.digest(), "seed": cfg.solver.seed, "n_paths": cfg.solver.n_paths,
            "n_steps": cfg.solver.n_steps, "basis": cfg.solver.basis.build().describe(),
            "z_method": cfg.solver.z_method, "basisrisk": __version__, "numpy": np.__version__,
            "scipy": scipy.__version__, "python": platform.python_version(),
            "gradient_source": "analytic gradient of fitted regression functions"}


def _report_points(cfg: ScenarioConfig, ens, r0) -> list:
    N = ens.n_steps
    points = [(0, r0[None])]
    for frac in cfg.report.time_fractions:
        i = int(round(frac * N))
        if 0 < i < N:
            points.append((i, np.quantile(ens.R[:, i], cfg.report.quantiles, axis=0)))
    return points


def _plot_rows(cfg: ScenarioConfig, price, ens, r0):
    """``(t, r, p, buyer_price, grad_p)`` along the first index coordinate at each
    reported time, other coordinates at their median."""
    rows = [(0.0, r0[None], price.p(0, r0[None]), price.grad(0, r0[None]))]
    N = ens.n_steps
    for frac in cfg.report.time_fractions:
        i = int(round(frac * N))
        if not 0 < i < N:
            continue
        R = ens.R[:, i]
        lo, hi = np.quantile(R[:, 0], [0.02, 0.98])
        pts = np.tile(np.median(R, axis=0), (cfg.report.plot_points, 1))
        pts[:, 0] = np.linspace(lo, hi, cfg.report.plot_points)
        rows.append((float(ens.times[i]), pts, price.p(i, pts), price.grad(i, pts)))
    return rows


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def _export_price(out: Path, plot_rows, m) -> list:
    rs = [f"r_{j + 1}" for j in range(m)]
    field_rows, plot = [], []
    for t, pts, p, g in plot_rows:
        for x, pv, gv in zip(pts, p, g):
            field_rows.append([t, *x, pv, -pv, *gv])
            plot.append([t, *x, pv])
    _write_csv(out / "price_field.csv", ["t", *rs, "p", "buyer_price", *[f"grad_p_{j + 1}" for j in range(m)]],
               field_rows)
    _write_csv(out / "plot_data.csv", ["t", *rs, "p"], plot)
    return [out / "price_field.csv", out / "plot_data.csv"]


def _relative_gap(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def compare_oracles(cfg: ScenarioConfig, spec=None, r0=None, price=None, n_nodes: Optional[int] = None) -> dict:
    """Regression against finite-difference prices at ``(0, r0)``.

    ``pde_refinement`` is the change in the PDE price from half resolution,
    the oracle's own error scale.
    """
    if spec is None:
        spec, r0, _ = cfg.build()
    if spec.m > 2:
        raise UnsupportedOracleError(f"the PDE oracle supports m <= 2, scenario has m = {spec.m}")
    if price is None:
        ens = simulate_paths(spec, 0.0, r0, cfg.solver.n_paths, cfg.solver.n_steps, cfg.solver.seed)
        basis = cfg.solver.basis.build()
        price = indifference_price(solve_backward(ens, spec, Terminal.WITH_CLAIM, basis, cfg.solver.z_method),
                                   solve_backward(ens, spec, Terminal.ZERO_CLAIM, basis, cfg.solver.z_method))
    nodes = n_nodes or cfg.oracles.pde_nodes or DEFAULT_PDE_NODES[spec.m]
    values = {}
    for n in (nodes, nodes // 2 + 1):
        grid = default_grid(spec, r0, n_nodes=n, n_out_steps=cfg.solver.n_steps)
        field_pde = indifference_price(pde_oracle(spec, Terminal.WITH_CLAIM, grid),
                                       pde_oracle(spec, Terminal.ZERO_CLAIM, grid))
        values[n] = (field_pde.p(0, r0[None])[0], field_pde.grad(0, r0[None])[0])
    p_pde, g_pde = values[nodes]
    p_reg = float(price.p(0, r0[None])[0])
    g_reg = price.grad(0, r0[None])[0]
    return {"p_regression": p_reg, "p_pde": float(p_pde),
            "p_gap": abs(p_reg - p_pde) / max(abs(p_pde), 0.01),
            "grad_regression": g_reg, "grad_pde": g_pde, "grad_gap": _relative_gap(g_reg, g_pde),
            "pde_refinement": abs(float(p_pde - values[nodes // 2 + 1][0])), "pde_nodes": nodes}


def _verify(report: RunReport, cfg: ScenarioConfig, spec, r0, ens, sol_with, sol_zero, price, basis) -> None:
    s = cfg.solver
    flow_ens = simulate_flow(spec, ens)
    gap = flow_bump_check(spec, flow_ens)
    report.add("flow vs path bump", gap <= FLOW_TOL, f"max relative gap {gap:.2e} (tol {FLOW_TOL:g})")
    lattice = r0[None]
    audit = lipschitz_audit(spec, lattice, max(s.n_paths // 5, 2000), s.n_steps, s.seed + 1, basis=basis)
    report.diagnostics["lipschitz_slope"] = audit.slope
    report.add("Lipschitz audit", audit.accepted,
               f"fitted exponent {audit.slope:.3f}" + ("" if not audit.flags else "; " + "; ".join(audit.flags)))
    if not spec.F.differentiable:
        report.notes.append(f"payoff {spec.F.name} has no pathwise gradient: gradient BSDE checks skipped, "
                            "gradient-based outputs are unreliable")
        return
    if not spec.F.smooth:
        report.notes.append(f"payoff {spec.F.name} is kinked: gradient outputs rely on its a.e. derivative")
    g_with = solve_gradient_bsde(sol_with, flow_ens, spec, basis, z_method=s.z_method)
    g_zero = solve_gradient_bsde(sol_zero, flow_ens, spec, basis, z_method=s.z_method)
    bump = bump_gradient(spec, r0, s.n_paths, s.n_steps, s.seed, Terminal.WITH_CLAIM, basis)
    gy = g_with.dY[:, 0].mean(axis=0)
    gap = _relative_gap(gy, bump)
    report.diagnostics["grad_y0_bsde"] = gy
    report.diagnostics["grad_y0_bump"] = bump
    report.add("gradient BSDE vs bump", gap <= BUMP_GRADIENT_TOL, f"relative gap {gap:.4f} (tol {BUMP_GRADIENT_TOL:g})")
    zc = check_z_representation(sol_with, g_with, flow_ens, spec)
    report.diagnostics["z_representation_l2"] = zc.relative_l2
    report.add("singular flow exclusions", zc.ok,
               f"{zc.excluded_paths} paths ({zc.excluded_fraction:.2%}) excluded")
    tri = hedge_triangulation(price, sol_with, sol_zero, g_with, g_zero, spec, r0)
    gaps = tri.pairwise_gaps()
    worst = max(gaps.values())
    report.diagnostics.update({f"hedge_{k}": v for k, v in
                               (("via_strategies", tri.via_strategies), ("via_price_gradient", tri.via_price_gradient),
                                ("via_gradient_bsde", tri.via_gradient_bsde))})
    report.add("hedge triangulation", worst <= TRIANGULATION_TOL,
               ", ".join(f"{k} {v:.4f}" for k, v in gaps.items()) + f" (tol {TRIANGULATION_TOL:g})")
    step = s.n_steps // 2
    # a smaller re-solve carries its own small-sample bias, so it uses the full path count
    dp = dynamic_programming_check(sol_with, ens, step, s.n_paths, s.seed + 2, basis=basis)
    report.diagnostics["dp_rms_z"] = dp.rms_z
    report.add("dynamic-programming consistency", dp.ok,
               f"rms standardised gap {dp.rms_z:.2f} at step {step} (tol 2)")


def run(cfg: ScenarioConfig, command: str = "hedge", out_dir: Optional[str] = None, write: bool = True) -> RunReport:
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}")
    t_start = time.perf_counter()
    spec, r0, notes = cfg.build()
    s = cfg.solver
    basis = s.basis.build()
    report = RunReport(command, cfg.scenario or "inline", r0, {}, None, notes=notes, provenance=_provenance(cfg))

    ens = simulate_paths(spec, 0.0, r0, s.n_paths, s.n_steps, s.seed)
    lattice = np.quantile(ens.R[:, -1], np.linspace(0.01, 0.99, 9), axis=0)
    assumptions = check_assumptions(spec, lattice)
    report.diagnostics.update({f"assumption_{k}": v for k, v in assumptions.items()})
    sol_with = solve_backward(ens, spec, Terminal.WITH_CLAIM, basis, s.z_method)
    sol_zero = solve_backward(ens, spec, Terminal.ZERO_CLAIM, basis, s.z_method)
    price = indifference_price(sol_with, sol_zero)
    p0 = float(price.p(0, r0[None])[0])
    report.summary.update({"p": p0, "buyer_price": -p0, "u_zero_claim": sol_zero.y0, "u_with_claim": sol_with.y0,
                           "p_stderr": float(np.hypot(sol_with.stderr_at(0, r0[None])[0],
                                                      sol_zero.stderr_at(0, r0[None])[0])),
                           "grad_p": price.grad(0, r0[None])[0]})
    for name, sol in (("with_claim", sol_with), ("zero_claim", sol_zero)):
        report.diagnostics[f"clip_fraction_{name}"] = sol.clip_fraction
        if sol.degree_reductions:
            report.notes.append(f"{name} basis reductions: {sol.degree_reductions}")
        if sol.jitter_used:
            report.notes.append(f"{name}: jitter added to beta beta^T")
    clip = max(sol_with.clip_fraction, sol_zero.clip_fraction)
    report.add("Z clipping", clip < MAX_CLIP_FRACTION, f"clip fraction {clip:.2e} (limit {MAX_CLIP_FRACTION:g})")
    c = growth_constant(make_context(spec, 0.0, ens.R[:, -1]))
    y_bound = spec.F.bound + c * spec.T
    y_max = float(np.max(np.abs(sol_with.Y)))
    report.add("bounded value process", y_max <= y_bound, f"sup|Y| = {y_max:.4g} <= {y_bound:.4g}")

    mup_sol = mup_linear(sol_zero, ens, spec, basis)
    report.summary["mup"] = mup_sol.y0
    hr = hedge_report(price, sol_with, sol_zero, spec, _report_points(cfg, ens, r0), mup_sol)
    report.hedge = hr
    report.summary["delta"] = hr.delta[0]
    from_gradient = derivative_hedge(price, spec, 0.0, r0[None])[0]
    report.summary["delta_from_gradient"] = from_gradient
    gap = _relative_gap(hr.delta[0], from_gradient)
    report.add("hedge formula equivalence", gap <= HEDGE_EQUIVALENCE_TOL,
               f"strategy-difference vs price-gradient hedge at r0: {gap:.4f} (tol {HEDGE_EQUIVALENCE_TOL:g})")

    if command == "mup" or cfg.oracles.mup_checks:
        tri = mup_triangulation(spec, r0, s.n_paths, s.n_steps, s.seed + 3, basis, q_step=s.q_step)
        for k, est in tri.items():
            report.diagnostics[f"mup_{k}"] = f"{est.value:.6g} +/- {est.stderr:.2g}"
        worst = 0.0
        for a, b in (("linear", "girsanov"), ("linear", "bump"), ("girsanov", "bump")):
            se = np.hypot(tri[a].stderr, tri[b].stderr)
            worst = max(worst, abs(tri[a].value - tri[b].value) / max(se, 1e-300))
        report.add("MUP triangulation", worst <= 3.0, f"largest pairwise gap {worst:.2f} sigma (tol 3)")

    if command == "verify" or cfg.oracles.gradient:
        _verify(report, cfg, spec, r0, ens, sol_with, sol_zero, price, basis)

    if command == "compare" or cfg.oracles.pde:
        if spec.m > 2:
            if command == "compare":
                raise UnsupportedOracleError(f"the PDE oracle supports m <= 2, scenario has m = {spec.m}")
            report.notes.append("PDE oracle skipped: m > 2")
        else:
            cmp = compare_oracles(cfg, spec, r0, price)
            report.diagnostics.update({f"oracle_{k}": v for k, v in cmp.items()})
            report.add("regression vs PDE price", cmp["p_gap"] <= COMPARE_TOL,
                       f"|p_reg - p_pde| / max(|p_pde|, 0.01) = {cmp['p_gap']:.4f} (tol {COMPARE_TOL:g}; "
                       f"PDE refinement delta {cmp['pde_refinement']:.2g})")

    report.provenance["threads"] = worker_count()
    report.provenance["wall_seconds"] = round(time.perf_counter() - t_start, 2)
    if write:
        out = Path(out_dir or cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        hr.to_csv(out / "hedge_report.csv")
        report.files.append(out / "hedge_report.csv")
        report.files += _export_price(out, _plot_rows(cfg, price, ens, r0), spec.m)
        write_solution_csv(sol_with, out / "solution_with_claim.csv", paths=64)
        write_solution_csv(sol_zero, out / "solution_zero_claim.csv", paths=64)
        report.files += [out / "solution_with_claim.csv", out / "solution_zero_claim.csv"]
        (out / "report.txt").write_text(report.text(), encoding="utf-8")
        report.files.append(out / "report.txt")
    return report
