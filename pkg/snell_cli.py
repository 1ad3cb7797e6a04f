#!/usr/bin/env python3
"""
Snell CLI - Command-line interface for the skeleton optimal-stopping studies

Usage:
    python3 snell_cli.py run <config.json> [--seed N] [--threads N] [--output-dir DIR]
    python3 snell_cli.py plan --e1 V --lambda V [--hurst V] [--horizon T]
    python3 snell_cli.py verify [--full] [--corrupt-norm SCALE] [--seed N] [--threads N]
    python3 snell_cli.py --print-defaults
"""

import argparse
import json
import logging
import sys

from snell.config import apply_cli_overrides, default_config, load_config
from snell.errors import ConfigError, DomainError, SnellError
from snell.experiment import ExperimentConfig, make_phi, plan_steps, run_experiment
from snell.verify import verify_suite

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger("snell.cli")


def cmd_run(args):
    """Run a convergence study"""
    config = load_config(args.config)
    config = apply_cli_overrides(config, seed=getattr(args, "seed", None), threads=getattr(args, "threads", None),
                                 output_dir=getattr(args, "output_dir", None))
    logging.getLogger().setLevel(config["runtime"].get("log_level", "INFO"))
    if getattr(args, "verbose", False):
        logging.getLogger().setLevel(logging.DEBUG)

    report = run_experiment(ExperimentConfig.from_dict(config))
    last = report.rows[-1]
    print(f"✓ {len(report.rows)} levels written to {config['runtime']['output_dir']}")
    print(f"  finest V0={last.value:.6g}  lower={last.lower:.6g}±{last.lower_se:.2g}  "
          f"reference={report.reference_kind}  slope={report.slope}")
    return 0


def cmd_plan(args):
    """Print k* and the stage count for a target error"""
    phi = make_phi("pow2")
    k_star, steps = plan_steps(phi, args.e1, args.lam, horizon=args.horizon, hurst=args.hurst)
    print(f"k*={k_star:.2f} eps={phi(k_star):.6g} steps={steps}")
    return 0


def cmd_verify(args):
    """Run the property battery"""
    summary = verify_suite(seed=getattr(args, "seed", 20240607), full=args.full,
                           threads=getattr(args, "threads", 1), norm_scale=args.corrupt_norm)
    return 0 if summary.passed else 1


def _common_flags():
    # SUPPRESS keeps the attribute absent unless given, so config values survive
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="Master seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="Worker threads for path chunks")
    common.add_argument("--output-dir", default=argparse.SUPPRESS, help="Directory for report files")
    common.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS, help="Debug logging")
    return common


def build_parser():
    common = _common_flags()
    parser = argparse.ArgumentParser(
        description="Optimal stopping on the Brownian exit-time skeleton",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s run configs/markov_put.json
  %(prog)s run configs/fbm_drift.json --seed 7 --threads 4 --output-dir reports/fbm
  %(prog)s plan --e1 0.40 --hurst 0.6 --lambda 0.15
  %(prog)s verify --full
        """
    )
    parser.add_argument("--print-defaults", action="store_true", help="Print the built-in configuration and exit")

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    run_parser = subparsers.add_parser("run", parents=[common], help="Run a convergence study")
    run_parser.add_argument("config", help="Path to a JSON configuration file")

    plan_parser = subparsers.add_parser("plan", parents=[common], help="Skeleton level and steps for a target error")
    plan_parser.add_argument("--e1", type=float, required=True, help="Target discretisation error in (0, 1)")
    plan_parser.add_argument("--lambda", dest="lam", type=float, required=True, help="Rate exponent in (H-1/2, 1/2)")
    plan_parser.add_argument("--hurst", type=float, help="Hurst index when the driver is fractional")
    plan_parser.add_argument("--horizon", type=float, default=1.0, help="Horizon T (default: 1)")

    verify_parser = subparsers.add_parser("verify", parents=[common], help="Run the property battery")
    verify_parser.add_argument("--full", action="store_true", help="Include the pipeline and coupling checks")
    verify_parser.add_argument("--corrupt-norm", type=float, default=1.0,
                               help="Scale the calibrated kernel constant (negative control)")
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.print_defaults:
        print(json.dumps(default_config(), indent=2))
        return 0
    if not args.command:
        parser.print_help()
        return 1
    if getattr(args, "verbose", False):
        logging.getLogger().setLevel(logging.DEBUG)

    commands = {
        "run": cmd_run,
        "plan": cmd_plan,
        "verify": cmd_verify,
    }
    try:
        return commands[args.command](args)
    except (ConfigError, DomainError) as e:
        print(f"✗ {e}", file=sys.stderr)
        return 2
    except SnellError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
