# SPDX-License-Identifier: Apache-2.0
"""
Temporal segment arithmetic: anchors, tIoU, the centre/log-length offset
transform and greedy NMS.

Segments are half-open real intervals in frame units.  Array forms use
``[N, 2]`` float arrays of (start, end); the pydantic types wrap single
values at module boundaries.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from tempo.errors import DomainError

TEMPORAL_STRIDE = 8
MAX_LOG_RATIO = 10.0

ANCHOR_PRESETS: dict[str, list[int]] = {
    "desk": [2, 3, 4, 6],
    "thumos14": [2, 4, 5, 6, 8, 9, 10, 12, 14, 16],
    "activitynet": [1, 2, 3, 4, 5, 6, 7, 8, 10, 12, 14, 16, 20, 24, 28, 32, 40, 48, 56, 64],
    "charades": [1, 2, 3, 4, 5, 6, 7, 8, 10, 12, 14, 16, 20, 24, 28, 32, 40, 48],
}


# ------------------------------------------------------------------ #
#  Types
# ------------------------------------------------------------------ #

class Segment(BaseModel):
    model_config = ConfigDict(frozen=True)

    center: float
    length: float = Field(gt=0)

    @classmethod
    def from_bounds(cls, start: float, end: float) -> Segment:
        if not end > start:
            raise DomainError(f"segment end {end} must exceed start {start}")
        return cls(center=(start + end) / 2.0, length=end - start)

    @property
    def start(self) -> float:
        return self.center - self.length / 2.0

    @property
    def end(self) -> float:
        return self.center + self.length / 2.0

    def bounds(self) -> tuple[float, float]:
        return self.start, self.end


class Offset(BaseModel):
    model_config = ConfigDict(frozen=True)

    dc: float
    dl: float

    @field_validator("dc", "dl")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not np.isfinite(value):
            raise ValueError("offset components must be finite")
        return value


class AnchorConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    scales: list[int]
    temporal_stride: int = TEMPORAL_STRIDE
    fps: float = 25.0

    @field_validator("scales")
    @classmethod
    def _increasing(cls, scales: list[int]) -> list[int]:
        if not scales:
            raise ValueError("at least one anchor scale is required")
        if any(s <= 0 for s in scales):
            raise ValueError("anchor scales must be positive")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ValueError("anchor scales must be strictly increasing")
        return scales

    @classmethod
    def preset(cls, name: str, fps: float = 25.0) -> AnchorConfig:
        try:
            return cls(scales=ANCHOR_PRESETS[name], fps=fps)
        except KeyError:
            raise DomainError(f"unknown anchor preset {name!r}; choose from {sorted(ANCHOR_PRESETS)}") from None

    @property
    def k(self) -> int:
        return len(self.scales)

    def durations(self) -> list[float]:
        """Anchor durations in seconds at ``fps``."""
        return [s * self.temporal_stride / self.fps for s in self.scales]


class ScoredSegment(BaseModel):
    model_config = ConfigDict(frozen=True)

    segment: Segment
    score: float = Field(ge=0.0, le=1.0)
    label: int | str = "proposal"


# ------------------------------------------------------------------ #
#  Anchors
# ------------------------------------------------------------------ #

def anchor_array(cfg: AnchorConfig, num_frames: int) -> np.ndarray:
    """``[(L/stride)*K, 2]`` anchor bounds, location-major then scale."""
    stride = cfg.temporal_stride
    if num_frames <= 0 or num_frames % stride:
        raise DomainError(f"frame count {num_frames} is not a positive multiple of {stride}")
    centers = (np.arange(num_frames // stride) + 0.5) * stride
    half = np.asarray(cfg.scales, dtype=np.float64) * stride / 2.0
    starts = centers[:, None] - half[None, :]
    ends = centers[:, None] + half[None, :]
    return np.stack([starts.ravel(), ends.ravel()], axis=1)


def generate_anchors(cfg: AnchorConfig, num_frames: int) -> list[Segment]:
    return [Segment.from_bounds(s, e) for s, e in anchor_array(cfg, num_frames)]


# ------------------------------------------------------------------ #
#  Overlap and coordinate transforms
# ------------------------------------------------------------------ #

def tiou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise tIoU between ``[N, 2]`` and ``[M, 2]`` bounds."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.clip(
        np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0]),
        0.0,
        None,
    )
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def tiou(a: Segment, b: Segment) -> float:
    return float(tiou_matrix([a.bounds()], [b.bounds()])[0, 0])


def _center_length(bounds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    bounds = np.asarray(bounds, dtype=np.float64).reshape(-1, 2)
    return (bounds[:, 0] + bounds[:, 1]) / 2.0, bounds[:, 1] - bounds[:, 0]


def encode_array(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Row-wise offsets ``(dc, dl)`` of ``gts`` against ``anchors``."""
    c, l = _center_length(anchors)
    gc, gl = _center_length(gts)
    if (l <= 0).any() or (gl <= 0).any():
        raise DomainError("segment lengths must be positive to encode offsets")
    return np.stack([(gc - c) / l, np.log(gl / l)], axis=1)


def decode_array(anchors: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Inverse of ``encode_array``; log-length offsets are clamped to +-10."""
    c, l = _center_length(anchors)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 2)
    dl = np.clip(offsets[:, 1], -MAX_LOG_RATIO, MAX_LOG_RATIO)
    center = c + offsets[:, 0] * l
    length = l * np.exp(dl)
    return np.stack([center - length / 2.0, center + length / 2.0], axis=1)


def encode(anchor: Segment, gt: Segment) -> Offset:
    if anchor.length <= 0 or gt.length <= 0:
        raise DomainError("segment lengths must be positive to encode offsets")
    return Offset(dc=(gt.center - anchor.center) / anchor.length, dl=float(np.log(gt.length / anchor.length)))


def decode(anchor: Segment, off: Offset) -> Segment:
    dl = float(np.clip(off.dl, -MAX_LOG_RATIO, MAX_LOG_RATIO))
    return Segment(center=anchor.center + off.dc * anchor.length, length=anchor.length * float(np.exp(dl)))


def clip_array(bounds: np.ndarray, num_frames: float) -> tuple[np.ndarray, np.ndarray]:
    """Clamp to ``[0, num_frames]``; the mask is False for degenerate rows."""
    clipped = np.clip(np.asarray(bounds, dtype=np.float64).reshape(-1, 2), 0.0, float(num_frames))
    return clipped, clipped[:, 1] > clipped[:, 0]


def clip(seg: Segment, num_frames: float) -> Segment | None:
    """Clamp into the buffer; ``None`` marks a segment dropped as degenerate."""
    (bounds,), keep = clip_array([seg.bounds()], num_frames)
    if not keep[0]:
        return None
    return Segment.from_bounds(*bounds)


# ------------------------------------------------------------------ #
#  Non-maximum suppression
# ------------------------------------------------------------------ #

def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties by lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


def nms_indices(bounds: np.ndarray, scores: np.ndarray, threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in selection order."""
    if not 0.0 <= threshold <= 1.0:
        raise DomainError(f"NMS threshold must lie in [0, 1], got {threshold}")
    bounds = np.asarray(bounds, dtype=np.float64).reshape(-1, 2)
    order = score_order(scores)
    keep: list[int] = []
    while order.size:
        best = int(order[0])
        keep.append(best)
        rest = order[1:]
        if not rest.size:
            break
        overlap = tiou_matrix(bounds[best:best + 1], bounds[rest])[0]
        order = rest[overlap <= threshold]
    return np.asarray(keep, dtype=np.int64)


def nms(items: Sequence[ScoredSegment], threshold: float) -> list[ScoredSegment]:
    if not items:
        return []
    bounds = np.asarray([it.segment.bounds() for it in items])
    scores = np.asarray([it.score for it in items])
    return [items[i] for i in nms_indices(bounds, scores, threshold)]
