# SPDX-License-Identifier: Apache-2.0
"""
tempo — command-line parser factory.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Sequence

from tempo import __version__
from tempo.commands import bench, detect, evaluate, synth, train
from tempo.config import settings
from tempo.errors import DataError, TempoError

logger = logging.getLogger("tempo")


def configure_logging() -> None:
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format=settings.log_format,
    )


def create_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tempo",
        description="Two-stream temporal activity detection on a synthetic desk-scale corpus.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    # Mount subcommands
    synth.register(subparsers)
    train.register(subparsers)
    detect.register(subparsers)
    evaluate.register(subparsers)
    bench.register(subparsers)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    configure_logging()
    args = create_parser().parse_args(argv)
    try:
        return args.func(args)
    except TempoError as exc:
        logger.error("%s failed: %s", args.command, exc.detail)
        print(exc.one_line(), file=sys.stderr)
        return 2
    except OSError as exc:
        error = DataError(str(exc.filename or args.command), exc.strerror or str(exc))
        logger.error("%s failed: %s", args.command, error.detail)
        print(error.one_line(), file=sys.stderr)
        return 2
