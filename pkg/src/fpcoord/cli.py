"""Command-line entry point: ``fpcoord <experiment> [--config PATH] ...``.

Without ``--config`` the shipped four-subsystem benchmark is used with the
experiment's default parameters.
"""
from __future__ import annotations

import argparse
import sys

from .bench import EXPERIMENTS, run_scenario, scenario_from_config, summarize, write_csv
from .config import ConfigError, load_config
from .coordinator import SubsystemFailure
from .fp_engine import DesignError, StrategyError

_HELP = {
    "beta-sweep": "scalar mixing: certificate vs. actual run per beta",
    "memory-sweep": "Anderson acceleration for several memory caps",
    "race": "Pi filter vs. Anderson vs. plain iteration, per-iteration eps",
    "closed-loop": "receding-horizon set-point tracking in control-profile mode",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fpcoord",
        description="Fixed-point coordination experiments on coupled subsystems.",
    )
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="experiment")
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=_HELP[name], description=_HELP[name])
        p.add_argument("--config", help="TOML scenario file (schema_version = 1)")
        p.add_argument("--seed", type=int, help="benchmark seed (overrides config)")
        p.add_argument("--out", help="CSV output path (default: stdout)")
        p.add_argument("--sigma-max", type=int, help="iteration cap per solve")
        p.add_argument("--eps-max", type=float, help="convergence tolerance")
        p.add_argument("--quiet", action="store_true", help="no summary table on stderr")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and args.seed < 0:
        print("fpcoord: error: --seed must be non-negative", file=sys.stderr)
        return 2
    if args.sigma_max is not None and args.sigma_max < 1:
        print("fpcoord: error: --sigma-max must be >= 1", file=sys.stderr)
        return 2
    if args.eps_max is not None and not args.eps_max > 0:
        print("fpcoord: error: --eps-max must be positive", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config) if args.config else {"schema_version": 1}
        scenario = scenario_from_config(
            cfg,
            experiment=args.experiment,
            seed=args.seed,
            sigma_max=args.sigma_max,
            eps_max=args.eps_max,
            out=args.out,
        )
        rows = run_scenario(scenario)
    except ConfigError as exc:
        print(f"fpcoord: config error: {exc}", file=sys.stderr)
        return 2
    except (DesignError, StrategyError, SubsystemFailure, ValueError) as exc:
        print(f"fpcoord: {args.experiment} failed: {exc}", file=sys.stderr)
        return 1

    text = write_csv(rows, scenario.out)
    if scenario.out is None:
        sys.stdout.write(text)
    if not args.quiet:
        print(summarize(scenario, rows), file=sys.stderr)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
