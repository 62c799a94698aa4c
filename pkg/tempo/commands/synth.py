# SPDX-License-Identifier: Apache-2.0
"""
synth — write the synthetic moving-block corpus (tensors plus train/test
manifests) from a ``key=value`` config.
"""

from __future__ import annotations

import argparse
import logging

from tempo.commands import add_seed
from tempo.config import SynthConfig, load_config_file, validate_config
from tempo.dataset import synth_generate

logger = logging.getLogger("tempo.commands.synth")


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("synth", help="generate the synthetic corpus")
    parser.add_argument("--config", help="synth config file (defaults are used when omitted)")
    parser.add_argument("--out", default="data", help="output directory (default: data)")
    add_seed(parser)
    parser.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    overrides = {"seed": args.seed}
    if args.config:
        cfg = load_config_file(args.config, SynthConfig, overrides)
    else:
        cfg = validate_config(SynthConfig, {k: v for k, v in overrides.items() if v is not None}, "defaults")
    train, test = synth_generate(cfg, args.out)
    print(f"train={args.out}/train.json videos={len(train.videos)}")
    print(f"test={args.out}/test.json videos={len(test.videos)}")
    return 0
