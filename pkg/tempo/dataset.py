# SPDX-License-Identifier: Apache-2.0
"""
Synthetic untrimmed-video corpus and buffer construction.

Every video is a noise background with zero or more activity instances.
An instance of class ``k`` is a square block that moves by a fixed
per-frame displacement (its motion signature) for the annotated interval.
The flow tensor holds the renderer's exact displacement: channel 0 is the
horizontal component, channel 1 the vertical one, and ``flow[:, t]`` is the
motion from frame ``t`` to ``t + 1`` (zero wherever nothing moves).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from tempo.config import SynthConfig, settings
from tempo.errors import DataError
from tempo.geometry import TEMPORAL_STRIDE
from tempo.models import Annotation, Detection, Manifest, VideoRecord
from tempo.storage import (
    load_tensor,
    read_detections,
    read_manifest,
    save_tensor,
    write_detections,
    write_manifest,
)
from tempo.tensor import Tensor

logger = logging.getLogger("tempo.dataset")

# First signatures are fixed so class 0 moves down and class 1 moves right.
_BASE_SIGNATURES: list[tuple[int, int]] = [
    (0, 1), (1, 0), (0, -1), (-1, 0), (1, 1), (-1, -1), (1, -1), (-1, 1),
]

_CLASS_COLOURS: list[tuple[float, float, float]] = [
    (1.0, 0.2, 0.2), (0.2, 1.0, 0.2), (0.2, 0.4, 1.0),
    (1.0, 1.0, 0.2), (1.0, 0.2, 1.0), (0.2, 1.0, 1.0),
]


# ------------------------------------------------------------------ #
#  Types
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class VideoSample:
    """One decoded video: ``rgb`` is [3, L, H, W], ``flow`` is [2, L-1, H, W]."""

    id: str
    fps: float
    rgb: Tensor
    flow: Tensor
    annotations: list[Annotation] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return self.rgb.shape[1]

    @property
    def duration(self) -> float:
        return self.num_frames / self.fps

    def gt_frames(self) -> tuple[np.ndarray, np.ndarray]:
        """Ground truth as ``[M, 2]`` frame bounds plus ``[M]`` labels."""
        bounds = np.asarray(
            [(a.start_sec * self.fps, a.end_sec * self.fps) for a in self.annotations],
            dtype=np.float64,
        ).reshape(-1, 2)
        labels = np.asarray([a.label for a in self.annotations], dtype=np.int64)
        return bounds, labels


@dataclass(frozen=True)
class Buffer:
    """A fixed-length network input cut from one video.

    ``gt_bounds`` are in buffer frames.  ``start_frame`` and ``num_valid``
    place the buffer inside the (possibly reversed) source video.
    """

    video_id: str
    fps: float
    rgb: Tensor
    flow: Tensor
    gt_bounds: np.ndarray
    gt_labels: np.ndarray
    start_frame: int
    num_valid: int
    reversed: bool = False
    flipped: bool = False

    @property
    def length(self) -> int:
        return self.rgb.shape[1]


# ------------------------------------------------------------------ #
#  Synthesis
# ------------------------------------------------------------------ #

def motion_signatures(num_classes: int) -> list[tuple[int, int]]:
    """Distinct integer (dx, dy) pixel-per-frame displacements, one per class."""
    out = list(_BASE_SIGNATURES[:num_classes])
    radius = 2
    while len(out) < num_classes:
        ring = [
            (dx, dy)
            for dx in range(-radius, radius + 1)
            for dy in range(-radius, radius + 1)
            if max(abs(dx), abs(dy)) == radius
        ]
        ring.sort(key=lambda p: (abs(p[0]) + abs(p[1]), -p[1], -p[0]))
        out.extend(ring[: num_classes - len(out)])
        radius += 1
    return out


def class_colour(label: int, color_cue: bool) -> np.ndarray:
    if not color_cue:
        return np.ones(3)
    base = _CLASS_COLOURS[label % len(_CLASS_COLOURS)]
    # Past the table, vary brightness so colours stay distinct.
    shade = 1.0 - 0.15 * (label // len(_CLASS_COLOURS))
    return np.asarray(base) * max(shade, 0.3)


def _place_intervals(cfg: SynthConfig, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """``(start, end, label)`` frame intervals for one video."""
    count = int(rng.integers(cfg.min_activities, cfg.max_activities + 1))
    if count == 0:
        return []
    durations = rng.integers(cfg.min_duration, cfg.max_duration + 1, size=count)
    labels = rng.integers(0, cfg.num_classes, size=count)
    if cfg.overlap:
        starts = [int(rng.integers(0, cfg.num_frames - d + 1)) for d in durations]
    else:
        slack = cfg.num_frames - int(durations.sum())
        cuts = np.sort(rng.integers(0, slack + 1, size=count))
        gaps = np.diff(np.concatenate([[0], cuts]))
        starts, cursor = [], 0
        for gap, d in zip(gaps, durations):
            cursor += int(gap)
            starts.append(cursor)
            cursor += int(d)
    return [(s, s + int(d), int(k)) for s, d, k in zip(starts, durations, labels)]


def render_video(
    cfg: SynthConfig,
    rng: np.random.Generator,
    signatures: Sequence[tuple[int, int]] | None = None,
) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int, int]]]:
    """Render one video; returns ``(rgb, flow, intervals)``."""
    signatures = signatures or motion_signatures(cfg.num_classes)
    length, size, block = cfg.num_frames, cfg.frame_size, cfg.block_size
    rgb = rng.random((3, length, size, size)) * cfg.noise
    flow = np.zeros((2, length - 1, size, size))
    intervals = _place_intervals(cfg, rng)
    offsets = np.arange(block)

    for start, end, label in intervals:
        dx, dy = signatures[label]
        x0, y0 = (int(v) for v in rng.integers(0, size, size=2))
        colour = class_colour(label, cfg.color_cue)
        for t in range(start, end):
            step = t - start
            ys = (y0 + dy * step + offsets) % size
            xs = (x0 + dx * step + offsets) % size
            rgb[:, t, ys[:, None], xs[None, :]] = colour[:, None, None]
            if t + 1 < end:
                flow[0, t, ys[:, None], xs[None, :]] = dx
                flow[1, t, ys[:, None], xs[None, :]] = dy
    return rgb, flow, intervals


def _synth_one(cfg: SynthConfig, index: int, video_id: str, out_dir: Path) -> VideoRecord:
    rng = np.random.default_rng(cfg.seed ^ index)
    rgb, flow, intervals = render_video(cfg, rng)
    rgb_rel = f"tensors/{video_id}.rgb.tnsr"
    flow_rel = f"tensors/{video_id}.flow.tnsr"
    save_tensor(out_dir / rgb_rel, Tensor(rgb.astype(np.float32)))
    save_tensor(out_dir / flow_rel, Tensor(flow.astype(np.float32)))
    annotations = [
        Annotation(label=label, start_sec=start / cfg.fps, end_sec=end / cfg.fps)
        for start, end, label in sorted(intervals)
    ]
    return VideoRecord(
        id=video_id,
        fps=cfg.fps,
        num_frames=cfg.num_frames,
        rgb_path=rgb_rel,
        flow_path=flow_rel,
        annotations=annotations,
    )


def synth_generate(cfg: SynthConfig, out_dir: str | Path) -> tuple[Manifest, Manifest]:
    """Write the train and test corpora under ``out_dir``.

    Video ``i`` (train first, then test) draws from ``seed ^ i`` so the
    output does not depend on scheduling.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(i, f"train_{i:04d}") for i in range(cfg.num_videos)]
    jobs += [(cfg.num_videos + j, f"test_{j:04d}") for j in range(cfg.num_test_videos)]

    with ThreadPoolExecutor(max_workers=settings.worker_count) as pool:
        records = list(pool.map(lambda job: _synth_one(cfg, job[0], job[1], out_dir), jobs))

    classes = [f"class_{k}" for k in range(cfg.num_classes)]
    train = Manifest(classes=classes, videos=records[: cfg.num_videos])
    test = Manifest(classes=classes, videos=records[cfg.num_videos:])
    write_manifest(out_dir / "train.json", train)
    write_manifest(out_dir / "test.json", test)
    logger.info(
        "Synthesized %d train / %d test videos (%d classes) in %s",
        len(train.videos), len(test.videos), cfg.num_classes, out_dir,
    )
    return train, test


# ------------------------------------------------------------------ #
#  Manifest-backed dataset
# ------------------------------------------------------------------ #

@dataclass
class Dataset:
    manifest: Manifest
    root: Path

    def __len__(self) -> int:
        return len(self.manifest.videos)

    @property
    def classes(self) -> list[str]:
        return self.manifest.classes

    def sample(self, index: int, dtype: type = np.float64) -> VideoSample:
        record = self.manifest.videos[index]
        rgb = load_tensor(self.root / record.rgb_path).astype(dtype)
        flow = load_tensor(self.root / record.flow_path).astype(dtype)
        _check_video_shapes(record, rgb, flow, self.root)
        return VideoSample(
            id=record.id,
            fps=record.fps,
            rgb=rgb,
            flow=flow,
            annotations=list(record.annotations),
        )

    def samples(self, dtype: type = np.float64) -> Iterator[VideoSample]:
        for i in range(len(self)):
            yield self.sample(i, dtype)


def _check_video_shapes(record: VideoRecord, rgb: Tensor, flow: Tensor, root: Path) -> None:
    if rgb.ndim != 4 or rgb.shape[0] != 3 or rgb.shape[1] != record.num_frames:
        raise DataError(
            str(root / record.rgb_path),
            f"expected [3, {record.num_frames}, H, W], got {list(rgb.shape)}",
            field="shape",
        )
    expected = (2, record.num_frames - 1, *rgb.shape[2:])
    if flow.shape != expected:
        raise DataError(
            str(root / record.flow_path),
            f"expected {list(expected)}, got {list(flow.shape)}",
            field="shape",
        )


def load_manifest(path: str | Path) -> Dataset:
    path = Path(path)
    return Dataset(manifest=read_manifest(path), root=path.parent)


def save_detections(path: str | Path, detections: Sequence[Detection]) -> int:
    return write_detections(path, detections)


def load_detections(path: str | Path) -> list[Detection]:
    return read_detections(path)


# ------------------------------------------------------------------ #
#  Buffers
# ------------------------------------------------------------------ #

def _remap_gts(
    bounds: np.ndarray,
    labels: np.ndarray,
    offset: int,
    buffer_len: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Shift into buffer frames, clip, drop when the clipped part keeps < 0.5 tIoU."""
    if not len(bounds):
        return np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
    shifted = bounds - offset
    clipped = np.clip(shifted, 0.0, float(buffer_len))
    kept_len = clipped[:, 1] - clipped[:, 0]
    orig_len = bounds[:, 1] - bounds[:, 0]
    # Clipped segment lies inside the original, so tIoU is the length ratio.
    keep = (kept_len > 0) & (kept_len >= 0.5 * orig_len)
    return clipped[keep], labels[keep]


def _split(
    video_id: str,
    fps: float,
    rgb: np.ndarray,
    flow: np.ndarray,
    bounds: np.ndarray,
    labels: np.ndarray,
    buffer_len: int,
    reversed_pass: bool,
) -> list[Buffer]:
    length = rgb.shape[1]
    count = max(1, math.ceil(length / buffer_len))
    out = []
    for j in range(count):
        start = j * buffer_len
        stop = min(start + buffer_len, length)
        chunk = rgb[:, start:stop]
        if stop - start < buffer_len:
            pad = np.repeat(rgb[:, -1:], buffer_len - (stop - start), axis=1)
            chunk = np.concatenate([chunk, pad], axis=1)
        flow_chunk = flow[:, start:min(start + buffer_len - 1, flow.shape[1])]
        if flow_chunk.shape[1] < buffer_len - 1:
            pad_shape = (2, buffer_len - 1 - flow_chunk.shape[1], *flow.shape[2:])
            flow_chunk = np.concatenate([flow_chunk, np.zeros(pad_shape, dtype=flow.dtype)], axis=1)
        gts, gt_labels = _remap_gts(bounds, labels, start, buffer_len)
        out.append(
            Buffer(
                video_id=video_id,
                fps=fps,
                rgb=Tensor(np.ascontiguousarray(chunk)),
                flow=Tensor(np.ascontiguousarray(flow_chunk)),
                gt_bounds=gts,
                gt_labels=gt_labels,
                start_frame=start,
                num_valid=stop - start,
                reversed=reversed_pass,
            )
        )
    return out


def _mirror(buf: Buffer) -> Buffer:
    flow = buf.flow.data[..., ::-1].copy()
    flow[0] = -flow[0]
    return Buffer(
        video_id=buf.video_id,
        fps=buf.fps,
        rgb=Tensor(np.ascontiguousarray(buf.rgb.data[..., ::-1])),
        flow=Tensor(flow),
        gt_bounds=buf.gt_bounds,
        gt_labels=buf.gt_labels,
        start_frame=buf.start_frame,
        num_valid=buf.num_valid,
        reversed=buf.reversed,
        flipped=True,
    )


def _reverse_flow(flow: np.ndarray) -> np.ndarray:
    """Flow of the time-reversed clip.

    Each displacement moves to the pixel it points at and changes sign, so
    reversed step ``t`` sits on reversed frame ``t``.  Displacements are
    rounded to whole pixels and wrap like the renderer.
    """
    height, width = flow.shape[2:]
    out = np.zeros_like(flow)
    t, y, x = np.nonzero(np.any(flow != 0, axis=0))
    dx, dy = flow[0, t, y, x], flow[1, t, y, x]
    ty = (y + np.rint(dy).astype(np.int64)) % height
    tx = (x + np.rint(dx).astype(np.int64)) % width
    out[0, t, ty, tx] = -dx
    out[1, t, ty, tx] = -dy
    return out[:, ::-1]


def build_buffers(
    sample: VideoSample,
    buffer_len: int,
    two_way: bool = False,
    flip: bool = False,
) -> list[Buffer]:
    """Cut a video into fixed-length buffers with remapped ground truth.

    Short videos repeat their last frame (flow pads with zeros), long ones
    split into consecutive buffers.  ``two_way`` appends a pass over the
    time-reversed video; ``flip`` appends mirrored copies of every buffer.
    """
    if buffer_len <= 0 or buffer_len % TEMPORAL_STRIDE:
        raise DataError(sample.id, f"buffer length {buffer_len} is not a positive multiple of {TEMPORAL_STRIDE}",
                        field="buffer_len")
    rgb, flow = sample.rgb.data, sample.flow.data
    bounds, labels = sample.gt_frames()
    buffers = _split(sample.id, sample.fps, rgb, flow, bounds, labels, buffer_len, reversed_pass=False)

    if two_way:
        length = sample.num_frames
        rev_bounds = np.stack([length - bounds[:, 1], length - bounds[:, 0]], axis=1) if len(bounds) else bounds
        buffers += _split(
            sample.id, sample.fps, rgb[:, ::-1], _reverse_flow(flow), rev_bounds, labels, buffer_len, reversed_pass=True
        )

    if flip:
        buffers += [_mirror(b) for b in buffers]
    return buffers
