"""Command line: ``python -m lqmart run <config.json> [options]``."""

from __future__ import annotations

import argparse
import sys

from .harness import THREADS_ENV, run


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lqmart", description="Run seeded martingale inequality experiments.",
                                     epilog=f"Set {THREADS_ENV} to evaluate instances on several threads.")
    sub = parser.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the experiments of a JSON config")
    r.add_argument("config", help="path to the experiment config")
    r.add_argument("--out", default="reports", help="directory for CSV and JSON reports")
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    r.add_argument("--baseline", default=None, help="regression baseline store (JSON)")
    r.add_argument("--update-baseline", action="store_true", help="record or widen baseline bands")
    r.add_argument("--force", action="store_true", help="allow baseline updates after config changes")
    args = parser.parse_args(argv)
    if args.force and not args.update_baseline:
        parser.error("--force only applies with --update-baseline")
    if args.update_baseline and args.baseline is None:
        parser.error("--update-baseline needs --baseline")
    return run(args.config, args.out, args.seed, args.baseline, args.update_baseline, args.force)


if __name__ == "__main__":
    sys.exit(main())
