"""Command-line entry point.

    basisrisk {price,hedge,mup,verify,compare} CONFIG [--seed N] [--paths N]
              [--steps N] [--out-dir DIR] [--oracle {on,off}]

Exit codes: 0 all checks pass, 2 an invariant check failed, 1 a
configuration or runtime error.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config
from .runner import COMMANDS, run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="basisrisk",
                                     description="Indifference prices and basis-risk hedges via quadratic BSDEs.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"price": "indifference price and price field",
             "hedge": "price plus optimal strategies, derivative hedge and MUP",
             "mup": "hedge plus the three-way marginal utility price check",
             "verify": "hedge plus the gradient verification suite",
             "compare": "regression against the finite-difference oracle (m <= 2)"}
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("config", help="JSON scenario config")
        p.add_argument("--seed", type=int)
        p.add_argument("--paths", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--out-dir")
        p.add_argument("--oracle", choices=("on", "off"), help="toggle the PDE oracle")
    return parser


def apply_overrides(cfg, args):
    solver = {}
    if args.seed is not None:
        solver["seed"] = args.seed
    if args.paths is not None:
        solver["n_paths"] = args.paths
    if args.steps is not None:
        solver["n_steps"] = args.steps
    update = {}
    if solver:
        update["solver"] = cfg.solver.model_copy(update=solver)
    if args.oracle is not None:
        update["oracles"] = cfg.oracles.model_copy(update={"pde": args.oracle == "on"})
    if args.out_dir is not None:
        update["out_dir"] = args.out_dir
    if not update:
        return cfg
    # re-validate so overrides obey the same constraints as the file
    return type(cfg).model_validate({**cfg.model_dump(), **{k: (v.model_dump() if hasattr(v, "model_dump") else v)
                                                            for k, v in update.items()}})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_overrides(load_config(args.config), args)
    except (ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    try:
        report = run(cfg, args.command)
    except Exception as exc:
        print(f"error in {type(exc).__module__}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(report.text())
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
