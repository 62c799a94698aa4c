# SPDX-License-Identifier: Apache-2.0
"""
detect — run a checkpoint over every video of a manifest and write
JSON-lines detections.
"""

from __future__ import annotations

import argparse
import logging

import numpy as np

from tempo.commands import add_seed, unit_float
from tempo.dataset import load_manifest, save_detections
from tempo.errors import DataError
from tempo.pipeline import detect_dataset
from tempo.train import load_model

logger = logging.getLogger("tempo.commands.detect")


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("detect", help="detect activities with a trained checkpoint")
    parser.add_argument("checkpoint")
    parser.add_argument("manifest")
    parser.add_argument("--out", default="detections.jsonl", help="detections file (default: detections.jsonl)")
    parser.add_argument("--alpha", type=unit_float, default=0.5, help="evaluation tIoU; final NMS uses alpha - 0.1")
    parser.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    output = parser.add_mutually_exclusive_group()
    output.add_argument(
        "--random-baseline", action="store_true",
        help="ignore the weights and emit shuffled anchor segments with random classes and scores",
    )
    output.add_argument(
        "--proposals", action="store_true",
        help="write up to 100 class-agnostic proposals per video (kind=proposal) for AR-AN evaluation",
    )
    add_seed(parser)
    parser.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    params, net, classes = load_model(args.checkpoint)
    dataset = load_manifest(args.manifest)
    if classes and classes != dataset.classes:
        raise DataError(args.manifest, f"classes {dataset.classes} differ from the checkpoint's {classes}", field="classes")
    dtype = np.dtype(args.dtype).type
    params = {name: t.astype(dtype) for name, t in params.items()}
    detections = detect_dataset(
        params, net, dataset,
        alpha=args.alpha,
        dtype=dtype,
        random_baseline=args.random_baseline,
        proposals=args.proposals,
        seed=7 if args.seed is None else args.seed,
    )
    count = save_detections(args.out, detections)
    print(f"detections={args.out} count={count}")
    return 0
