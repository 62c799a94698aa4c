# SPDX-License-Identifier: Apache-2.0
"""
tempo — configuration.

Runtime settings come from the environment (``TEMPO_*`` variables or a
``.env`` file).  Run configurations for ``synth`` and ``train`` are flat
``key=value`` files validated by the pydantic models below.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Literal, TypeVar

import numpy as np
from dotenv import dotenv_values
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    ValidationInfo,
    field_validator,
    model_validator,
)
from pydantic_settings import BaseSettings, SettingsConfigDict

from tempo.errors import ConfigError
from tempo.geometry import ANCHOR_PRESETS, TEMPORAL_STRIDE

FusionMode = Literal["single", "two_sum", "two_concat"]

WIDTH_PRESETS: dict[str, list[int]] = {
    "desk": [8, 16, 32, 32, 32],
    "full": [64, 128, 256, 512, 512],
}

GRID_PRESETS: dict[str, tuple[int, int, int]] = {
    "desk": (1, 2, 2),
    "full": (1, 4, 4),
}


class Settings(BaseSettings):
    # Parallelism cap for per-video work; 0 means one worker per CPU
    threads: int = 0

    # Logging
    log_level: str = "info"
    log_format: str = "%(asctime)s  %(levelname)-8s  %(name)s  %(message)s"

    # Derived helpers
    @property
    def worker_count(self) -> int:
        return self.threads if self.threads > 0 else (os.cpu_count() or 1)

    model_config = SettingsConfigDict(env_prefix="TEMPO_", env_file=".env", env_file_encoding="utf-8", extra="ignore")


settings = Settings()


# ------------------------------------------------------------------ #
#  Run configuration files
# ------------------------------------------------------------------ #

def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


_PRESETS_BY_FIELD: dict[str, dict[str, Any]] = {
    "widths": WIDTH_PRESETS,
    "anchor_scales": ANCHOR_PRESETS,
    "roi_grid": GRID_PRESETS,
}


class SynthConfig(BaseModel):
    """Synthetic corpus; durations are in frames."""

    model_config = ConfigDict(extra="forbid")

    num_videos: int = Field(default=200, gt=0)
    num_test_videos: int = Field(default=50, ge=0)
    num_classes: int = Field(default=3, gt=0)
    num_frames: int = Field(default=96, gt=0)
    frame_size: int = Field(default=32, gt=0)
    fps: float = Field(default=8.0, gt=0)
    min_duration: int = Field(default=16, gt=1)
    max_duration: int = Field(default=48, gt=1)
    min_activities: int = Field(default=1, ge=0)
    max_activities: int = Field(default=2, ge=0)
    block_size: int = Field(default=8, gt=0)
    noise: float = Field(default=0.5, ge=0.0, le=1.0)
    overlap: bool = False
    color_cue: bool = True
    seed: int = 7

    @model_validator(mode="after")
    def _feasible(self) -> SynthConfig:
        if self.min_duration > self.max_duration:
            raise ValueError("min_duration exceeds max_duration")
        if self.min_activities > self.max_activities:
            raise ValueError("min_activities exceeds max_activities")
        if self.max_duration > self.num_frames:
            raise ValueError("max_duration does not fit inside num_frames")
        if self.block_size > self.frame_size:
            raise ValueError("block_size exceeds frame_size")
        if not self.overlap and self.max_activities * self.max_duration > self.num_frames:
            raise ValueError(
                f"infeasible packing: {self.max_activities} activities of up to "
                f"{self.max_duration} frames do not fit in {self.num_frames} frames"
            )
        return self


class NetworkConfig(BaseModel):
    """Architecture description stored inside every checkpoint."""

    model_config = ConfigDict(frozen=True)

    num_classes: int = Field(gt=0)
    mode: FusionMode = "single"
    widths: list[int] = Field(default_factory=lambda: list(WIDTH_PRESETS["desk"]))
    anchor_scales: list[int] = Field(default_factory=lambda: list(ANCHOR_PRESETS["desk"]))
    roi_grid: tuple[int, int, int] = GRID_PRESETS["desk"]
    hidden: int = Field(default=256, gt=0)
    class_agnostic: bool = False
    clip_anchors: bool = True
    nms_threshold: float = Field(default=0.7, ge=0.0, le=1.0)
    test_top_n: int = Field(default=300, gt=0)
    buffer_len: int = Field(default=96, gt=0)

    @property
    def k(self) -> int:
        return len(self.anchor_scales)

    @property
    def two_stream(self) -> bool:
        return self.mode != "single"

    @property
    def fusion(self) -> Literal["sum", "concat"]:
        return "concat" if self.mode == "two_concat" else "sum"


class TrainConfig(BaseModel):
    """Training run.  Keys mirror the documented ``train.cfg`` file."""

    model_config = ConfigDict(extra="forbid")

    train_manifest: Path = Path("data/train.json")
    output_dir: Path = Path("runs/desk")
    seed: int = 7
    dtype: Literal["float64", "float32"] = "float64"

    # Model
    mode: FusionMode = "single"
    widths: list[int] = Field(default_factory=lambda: list(WIDTH_PRESETS["desk"]))
    anchor_scales: list[int] = Field(default_factory=lambda: list(ANCHOR_PRESETS["desk"]))
    roi_grid: list[int] = Field(default_factory=lambda: list(GRID_PRESETS["desk"]))
    hidden: int = Field(default=256, gt=0)
    class_agnostic: bool = False
    clip_anchors: bool = True

    # Buffers and augmentation
    buffer_len: int = Field(default=96, gt=0)
    two_way: bool = False
    flip: bool = False

    # Optimisation.  Every weight trains from scratch on the small corpus, so
    # the step schedule starts at 1e-2 and drops tenfold after epoch 10; runs
    # fine-tuning pretrained weights want a much lower base_lr.
    epochs: int = Field(default=15, gt=0)
    base_lr: float = Field(default=0.01, ge=0.0)
    lr_drop_epoch: int = Field(default=10, ge=0)
    lr_drop_factor: float = Field(default=0.1, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=0.0005, ge=0.0)
    lam: float = Field(default=1.0, ge=0.0)
    freeze_convs: int = Field(default=0, ge=0, le=8)

    # Sampling
    rpn_batch: int = Field(default=64, gt=0)
    rpn_pos_frac: float = Field(default=0.5, gt=0.0, le=1.0)
    cls_batch: int = Field(default=128, gt=0)
    cls_pos_frac: float = Field(default=0.25, gt=0.0, le=1.0)
    train_top_n: int = Field(default=2000, gt=0)
    test_top_n: int = Field(default=300, gt=0)
    nms_threshold: float = Field(default=0.7, ge=0.0, le=1.0)
    append_gt_proposals: bool = True
    ohem: bool = False
    ohem_top_n: int = Field(default=128, gt=0)

    # Plumbing
    prefetch: int = Field(default=4, gt=0)
    checkpoint_every: int = Field(default=1, gt=0)

    @field_validator("widths", "anchor_scales", "roi_grid", mode="before")
    @classmethod
    def _comma_lists(cls, value: Any, info: ValidationInfo) -> Any:
        presets = _PRESETS_BY_FIELD[info.field_name]
        if isinstance(value, str) and value.strip() in presets:
            return list(presets[value.strip()])
        return _split_list(value)

    @field_validator("widths")
    @classmethod
    def _five_stages(cls, widths: list[int]) -> list[int]:
        if len(widths) != 5 or any(w <= 0 for w in widths):
            raise ValueError("widths needs five positive stage widths")
        return widths

    @field_validator("anchor_scales")
    @classmethod
    def _scales(cls, scales: list[int]) -> list[int]:
        if not scales or any(s <= 0 for s in scales) or any(b <= a for a, b in zip(scales, scales[1:])):
            raise ValueError("anchor_scales must be positive and strictly increasing")
        return scales

    @field_validator("roi_grid")
    @classmethod
    def _grid(cls, grid: list[int]) -> list[int]:
        if len(grid) != 3 or any(g < 1 for g in grid):
            raise ValueError("roi_grid needs three components >= 1")
        return grid

    @model_validator(mode="after")
    def _consistent(self) -> TrainConfig:
        if self.buffer_len % TEMPORAL_STRIDE:
            raise ValueError(f"buffer_len {self.buffer_len} is not divisible by {TEMPORAL_STRIDE}")
        if self.rpn_batch % 2:
            raise ValueError("rpn_batch must be even")
        return self

    def network(self, num_classes: int) -> NetworkConfig:
        return NetworkConfig(
            num_classes=num_classes,
            mode=self.mode,
            widths=self.widths,
            anchor_scales=self.anchor_scales,
            roi_grid=tuple(self.roi_grid),
            hidden=self.hidden,
            class_agnostic=self.class_agnostic,
            clip_anchors=self.clip_anchors,
            nms_threshold=self.nms_threshold,
            test_top_n=self.test_top_n,
            buffer_len=self.buffer_len,
        )

    def lr_at(self, epoch: int) -> float:
        return self.base_lr * (self.lr_drop_factor if epoch >= self.lr_drop_epoch else 1.0)

    @property
    def numpy_dtype(self) -> type:
        return np.float32 if self.dtype == "float32" else np.float64


ConfigT = TypeVar("ConfigT", bound=BaseModel)


def validate_config(model: type[ConfigT], values: dict[str, Any], source: str = "<config>") -> ConfigT:
    """Validate raw values, turning pydantic errors into a ConfigError naming the key."""
    try:
        return model.model_validate(values)
    except ValidationError as exc:
        first = exc.errors()[0]
        key = ".".join(str(p) for p in first.get("loc", ())) or None
        raise ConfigError(f"{first.get('msg', 'invalid value')} (in {source})", key=key) from None


def load_config_file(path: str | Path, model: type[ConfigT], overrides: dict[str, Any] | None = None) -> ConfigT:
    """Parse a flat ``key=value`` file and validate it against ``model``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", key="--config")
    raw = {k.strip(): v for k, v in dotenv_values(path).items()}
    missing = [k for k, v in raw.items() if v is None]
    if missing:
        raise ConfigError("line has no '=' value", key=missing[0])
    values: dict[str, Any] = dict(raw)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return validate_config(model, values, str(path))
