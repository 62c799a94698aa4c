# SPDX-License-Identifier: Apache-2.0
"""
eval — score a detections file against a manifest's ground truth.
"""

from __future__ import annotations

import argparse
import logging

from tempo.commands import positive_int, unit_float
from tempo.dataset import load_detections
from tempo.metrics import evaluate, write_report
from tempo.storage import read_manifest

logger = logging.getLogger("tempo.commands.eval")

METRICS = ("map", "avg_map", "auc", "frame_map")


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("eval", help="compute mAP, average mAP, AR-AN AUC or frame-level mAP")
    parser.add_argument("detections")
    parser.add_argument("manifest")
    parser.add_argument("--metric", choices=METRICS, default="map")
    parser.add_argument("--alpha", type=unit_float, nargs="+", default=[0.5], help="tIoU thresholds for --metric map")
    parser.add_argument("--smooth", type=positive_int, default=None, help="frame_map score smoothing window")
    parser.add_argument("--out", default="report", help="report directory (default: report)")
    parser.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    manifest = read_manifest(args.manifest)
    detections = load_detections(args.detections)
    rows = evaluate(detections, manifest, args.metric, args.alpha, args.smooth or 0)
    write_report(rows, args.out, args.detections, args.manifest, args.metric)
    for row in rows:
        if row.class_or_all == "ALL":
            at = "" if row.alpha is None else f"@{row.alpha:g}"
            print(f"{row.metric}{at}={row.value:.4f}")
    return 0
