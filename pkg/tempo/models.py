# SPDX-License-Identifier: Apache-2.0
"""
Pydantic models for everything that crosses a file boundary: the dataset
manifest, detections, metric reports and run summaries.  Field names match
the JSON written to disk.
"""

from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, Field, model_validator


# ------------------------------------------------------------------ #
#  Dataset manifest
# ------------------------------------------------------------------ #

class Annotation(BaseModel):
    """One ground-truth activity, in seconds."""

    label: int = Field(ge=0)
    start_sec: float = Field(ge=0.0)
    end_sec: float

    @model_validator(mode="after")
    def _ordered(self) -> Annotation:
        if not self.end_sec > self.start_sec:
            raise ValueError(f"end_sec {self.end_sec} must exceed start_sec {self.start_sec}")
        return self


class VideoRecord(BaseModel):
    id: str
    fps: float = Field(gt=0)
    num_frames: int = Field(gt=0)
    rgb_path: str
    flow_path: str
    annotations: list[Annotation] = []

    @property
    def duration(self) -> float:
        return self.num_frames / self.fps


class Manifest(BaseModel):
    classes: list[str] = []
    videos: list[VideoRecord] = []

    @model_validator(mode="after")
    def _labels_known(self) -> Manifest:
        for video in self.videos:
            for ann in video.annotations:
                if ann.label >= len(self.classes):
                    raise ValueError(f"video {video.id}: label {ann.label} has no class name")
        return self

    def video(self, video_id: str) -> VideoRecord | None:
        return next((v for v in self.videos if v.id == video_id), None)


# ------------------------------------------------------------------ #
#  Detections
# ------------------------------------------------------------------ #

class Detection(BaseModel):
    """One JSON-lines row of detector output.

    Class-agnostic proposal rows carry ``kind="proposal"`` and label 0; the
    field is omitted from written rows when it holds its default.
    """

    video_id: str
    label: int = Field(ge=0)
    start_sec: float
    end_sec: float
    score: float = Field(ge=0.0, le=1.0)
    kind: Literal["detection", "proposal"] = "detection"

    @property
    def is_proposal(self) -> bool:
        return self.kind == "proposal"


# ------------------------------------------------------------------ #
#  Reports
# ------------------------------------------------------------------ #

class MetricRow(BaseModel):
    metric: str
    class_or_all: str
    alpha: float | None = None
    value: float


class EvalSummary(BaseModel):
    """Headline numbers, one entry per reported row of the summary table."""

    detections: str
    manifest: str
    metric: str
    rows: dict[str, float] = {}


class TrainSummary(BaseModel):
    output_dir: str
    epochs: int
    iterations: int
    final_total_loss: float
    first_total_loss: float
    wall_seconds: float
    checkpoint: str
    config: dict[str, Any] = {}


class BenchReport(BaseModel):
    checkpoint: str
    videos: int
    frames_per_repeat: int
    fps: list[float]
    mean_fps: float
    spread: float = Field(description="(max - min) / mean over repeats")
