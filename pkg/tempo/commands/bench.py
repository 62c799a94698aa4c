# SPDX-License-Identifier: Apache-2.0
"""
bench — inference throughput in input frames per wall-clock second.

Videos are loaded and cut into buffers before the clock starts, so the
timing covers the backbone, proposal and classification stages only.
"""

from __future__ import annotations

import argparse
import logging
import time
from pathlib import Path

import numpy as np

from tempo.commands import positive_int
from tempo.dataset import build_buffers, load_manifest
from tempo.errors import DataError
from tempo.models import BenchReport
from tempo.pipeline import detect_buffer
from tempo.train import load_model

logger = logging.getLogger("tempo.commands.bench")


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("bench", help="measure detection throughput")
    parser.add_argument("checkpoint")
    parser.add_argument("manifest")
    parser.add_argument("--repeat", type=positive_int, default=3)
    parser.add_argument("--videos", type=positive_int, default=None, help="only the first N videos")
    parser.add_argument("--out", default=None, help="write the report JSON here")
    parser.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    params, net, _ = load_model(args.checkpoint)
    dataset = load_manifest(args.manifest)
    count = min(len(dataset), args.videos or len(dataset))
    if count == 0:
        raise DataError(args.manifest, "no videos to benchmark", field="videos")

    buffers = [buf for i in range(count) for buf in build_buffers(dataset.sample(i), net.buffer_len)]
    frames = sum(buf.num_valid for buf in buffers)

    rates = []
    for r in range(args.repeat):
        started = time.perf_counter()
        for buf in buffers:
            detect_buffer(params, net, buf)
        elapsed = time.perf_counter() - started
        rates.append(frames / elapsed)
        logger.info("Repeat %d/%d: %d frames in %.3fs (%.1f fps)", r + 1, args.repeat, frames, elapsed, rates[-1])

    mean = float(np.mean(rates))
    report = BenchReport(
        checkpoint=str(args.checkpoint),
        videos=count,
        frames_per_repeat=frames,
        fps=rates,
        mean_fps=mean,
        spread=float((max(rates) - min(rates)) / mean),
    )
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.model_dump_json(indent=2), encoding="utf-8")
        logger.info("Bench report written: %s", out)
    print(f"mode={net.mode} frames={frames} mean_fps={mean:.1f} spread={report.spread:.3f}")
    return 0
