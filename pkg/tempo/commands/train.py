# SPDX-License-Identifier: Apache-2.0
"""
train — fit a model on a manifest; flags override the config file.
"""

from __future__ import annotations

import argparse
import logging

from tempo.commands import MODES, add_seed
from tempo.config import TrainConfig, load_config_file, validate_config
from tempo.dataset import load_manifest
from tempo.train import train

logger = logging.getLogger("tempo.commands.train")


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("train", help="train a detector and write checkpoints")
    parser.add_argument("--config", help="train config file (defaults are used when omitted)")
    parser.add_argument("--manifest", help="training manifest (overrides train_manifest)")
    parser.add_argument("--out", help="run directory (overrides output_dir)")
    parser.add_argument("--mode", choices=MODES, default=None)
    parser.add_argument("--ohem", action="store_true", default=None, help="online hard example mining")
    parser.add_argument("--two-way", action="store_true", default=None, help="add time-reversed buffers")
    parser.add_argument("--flip", action="store_true", default=None, help="add horizontally mirrored buffers")
    add_seed(parser)
    parser.set_defaults(func=run)


def overrides_from(args: argparse.Namespace) -> dict:
    return {
        "train_manifest": args.manifest,
        "output_dir": args.out,
        "mode": args.mode,
        "ohem": args.ohem,
        "two_way": args.two_way,
        "flip": args.flip,
        "seed": args.seed,
    }


def run(args: argparse.Namespace) -> int:
    overrides = overrides_from(args)
    if args.config:
        cfg = load_config_file(args.config, TrainConfig, overrides)
    else:
        cfg = validate_config(TrainConfig, {k: v for k, v in overrides.items() if v is not None}, "flags")
    dataset = load_manifest(cfg.train_manifest)
    summary = train(dataset, cfg)
    print(f"checkpoint={summary.checkpoint} iterations={summary.iterations} "
          f"first_loss={summary.first_total_loss:.5f} final_loss={summary.final_total_loss:.5f}")
    return 0
