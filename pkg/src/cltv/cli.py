"""``cltv <subcommand> --config <path> [--seed N] [--deterministic] [--artifacts DIR]``"""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__, pipeline
from .errors import CltvError

log = logging.getLogger("cltv")

HELP = {
    "datagen": "write a synthetic event log and its ground truth",
    "features": "handcrafted features, labels and fold assignment",
    "embed": "train customer embeddings on co-viewing pairs",
    "train": "fit the churn and percentile forests",
    "calibrate": "fit Platt scaling and the percentile-to-value map",
    "predict": "write per-customer predictions",
    "evaluate": "score predictions on the test fold",
    "rolling": "retrain over sliding windows and compare embedding drift",
    "run": "datagen through evaluate in one go",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cltv", description="Churn and lifetime-value pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="<subcommand>")
    for name, text in HELP.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded, bit-reproducible training")
        p.add_argument("--artifacts", help="override the artifacts directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "rolling":
            p.add_argument("--periods", type=int, help="override rolling.n_periods")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = pipeline.load_config(args.config, args.seed, args.deterministic, args.artifacts)
        if args.command == "run":
            pipeline.run_chain(cfg)
        elif args.command == "rolling":
            pipeline.cmd_rolling(cfg, args.periods)
        else:
            manifest = pipeline.COMMANDS[args.command](cfg)
            log.info("wrote %s", manifest)
    except CltvError as exc:
        print(f"cltv {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
