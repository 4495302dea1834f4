"""Command line: ``feddistill run``, ``feddistill report``, ``feddistill diagnose``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import experiment
from .errors import ConfigError, FedDistillError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feddistill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every (strategy, seed) pair in a config")
    run.add_argument("--config", required=True, help="YAML experiment config")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config value, e.g. federation.rounds=2 (repeatable)")
    run.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    rep = sub.add_parser("report", help="strategy comparison table for a finished run directory")
    rep.add_argument("run_dir")

    diag = sub.add_parser("diagnose", help="logit L1 diagnostic CSVs and activation dumps")
    diag.add_argument("run_dir")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            cfg = experiment.load_config_file(args.config, args.overrides)
            root = experiment.run_experiment(cfg, jobs=args.jobs)
            print(f"wrote {root}")
            print(experiment.report(root), end="")
        elif args.command == "report":
            print(experiment.report(args.run_dir), end="")
        elif args.command == "diagnose":
            results = experiment.diagnose(args.run_dir)
            for (strategy, seed), rows in results.items():
                syn = sum(r[1] for r in rows) / max(len(rows), 1)
                rnd = sum(r[2] for r in rows) / max(len(rows), 1)
                print(f"{strategy} seed{seed}: mean L1 synthetic-real {syn:.4f}, random-real {rnd:.4f}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedDistillError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
