import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

# Import command modules
from components.analyze import ANALYSES, cmd_analyze
from components.gradcheck import cmd_gradcheck
from components.partition import cmd_partition
from components.run import cmd_run
from components.sweep import cmd_sweep


# Load environment variables
load_dotenv()

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging() -> None:
    level = os.getenv("FLLAB_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT, stream=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fllab",
        description="Deterministic federated-learning backdoor simulation lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_overrides(p: argparse.ArgumentParser) -> None:
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dot-path config override, e.g. attack.alpha=0.7 (repeatable)")

    run = sub.add_parser("run", help="run a simulation and write its artifacts")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True, help="run directory")
    add_overrides(run)

    partition = sub.add_parser("partition", help="write the Dirichlet partition plan")
    partition.add_argument("--config", required=True)
    partition.add_argument("--out", required=True, help="plan JSON path")
    add_overrides(partition)

    analyze = sub.add_parser("analyze", help="analyse a finished run directory")
    analyze.add_argument("analysis", choices=ANALYSES)
    analyze.add_argument("--in", dest="run_dir", required=True, help="run directory")
    analyze.add_argument("--window", type=int, default=None, help="smoothing window (odd)")
    add_overrides(analyze)

    # shortcuts for the two most used analyses
    for name in ("gains", "distances"):
        shortcut = sub.add_parser(name, help=f"same as: analyze {name}")
        shortcut.add_argument("--in", dest="run_dir", required=True, help="run directory")
        add_overrides(shortcut)

    sweep = sub.add_parser("sweep", help="run one simulation per point of a parameter grid")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--out", required=True, help="sweep table CSV path")
    sweep.add_argument("--grid", dest="axes", action="append", default=[], metavar="KEY=[V1,...]",
                       help="grid axis as a JSON list, e.g. attack.alpha=[0.3,0.5,0.7,0.9] (repeatable)")
    add_overrides(sweep)

    gradcheck = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    gradcheck.add_argument("--config", default=None, help="config file (defaults apply when omitted)")
    add_overrides(gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)

    # Command routing
    if args.command == "run":
        return cmd_run(args.config, args.out, args.overrides)
    elif args.command == "partition":
        return cmd_partition(args.config, args.out, args.overrides)
    elif args.command == "analyze":
        return cmd_analyze(args.analysis, args.run_dir, args.window, args.overrides)
    elif args.command in ("gains", "distances"):
        return cmd_analyze(args.command, args.run_dir, None, args.overrides)
    elif args.command == "sweep":
        return cmd_sweep(args.config, args.out, args.axes, args.overrides)
    elif args.command == "gradcheck":
        return cmd_gradcheck(args.config, args.overrides)
    return 2


if __name__ == "__main__":
    sys.exit(main())
