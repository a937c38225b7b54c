"""``advdetect train|attack|fit-detector|evaluate|report --config PATH [--seed N] [--out DIR]``"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .types import AdvDetectError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advdetect", description="Adversarial-example detection experiments.")
    sub = parser.add_subparsers(dest="stage", required=True)
    for name, fn in pipeline.STAGES.items():
        p = sub.add_parser(name, help=fn.__doc__.strip().splitlines()[0])
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the base seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = pipeline.load_config(args.config, seed=args.seed, out=args.out)
        result = pipeline.STAGES[args.stage](cfg)
    except AdvDetectError as e:
        print(f"advdetect {args.stage}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    for name, path in result.items():
        print(f"{name}\t{path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
