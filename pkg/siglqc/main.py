#!/usr/bin/env python3
"""SIG-LQC: signature controls for linear-quadratic stochastic control.

Usage:
    python3 main.py run --config config.yaml [--seed N] [--workers N]
    python3 main.py validate --config config.yaml
    python3 main.py dump-tensor --config config.yaml --level-state 5 --level-control 2 --coord 1

Exit codes: 0 ok, 1 config error, 2 numerical failure.
"""

import sys
import os
import argparse

# Add siglqc directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from experiment import dump_tensor, load_experiment, run_experiment, validate
from tensor_algebra import format_tensor
from utils import SigLQCError, Stopwatch

DEFAULT_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), "config.yaml")


def build_parser():
    parser = argparse.ArgumentParser(prog="sig-lqc",
                                     description="Signature controls for LQ stochastic control")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=DEFAULT_CONFIG,
                        help="Path to experiment config YAML")
    common.add_argument("--seed", type=int, default=None, help="Override experiment.seed")
    common.add_argument("--workers", type=int, default=None, help="Override experiment.workers")
    common.add_argument("--quiet", action="store_true", help="Suppress progress lines")

    run = sub.add_parser("run", parents=[common], help="Run the (L, M) sweep")
    run.add_argument("--output-dir", type=str, default=None,
                     help="Override experiment.output_dir")

    sub.add_parser("validate", parents=[common], help="Check a config without running it")

    dump = sub.add_parser("dump-tensor", parents=[common],
                          help="Print one coordinate of an optimal control tensor")
    dump.add_argument("--level-state", type=int, required=True, help="State truncation level L")
    dump.add_argument("--level-control", type=int, required=True, help="Control level M")
    dump.add_argument("--coord", type=int, default=1, help="Control coordinate k (1-based)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    watch = Stopwatch()

    try:
        cfg = load_experiment(args.config, seed=args.seed, workers=args.workers,
                              output_dir=getattr(args, "output_dir", None))

        if args.command == "validate":
            issues = validate(cfg)
            for issue in issues:
                print(issue)
            if not issues and not args.quiet:
                print("[main] config OK")
            return 1 if any(i.level == "error" for i in issues) else 0

        if args.command == "dump-tensor":
            coord = dump_tensor(cfg, args.level_state, args.level_control, args.coord,
                                quiet=args.quiet)
            sys.stdout.write(format_tensor(coord))
            return 0

        summary = run_experiment(cfg, quiet=args.quiet)
        if not args.quiet:
            print(f"[main] best {summary['best_run']}: cost {summary['best_cost']:.6g}")
        return 0

    except SigLQCError as e:
        print(f"[main] {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"[main] invalid input: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("\n[main] Interrupted", file=sys.stderr)
        return 130
    finally:
        if not args.quiet and args.command == "run":
            print(f"[main] {args.command} finished in {watch.elapsed():.1f}s")


if __name__ == "__main__":
    sys.exit(main())
