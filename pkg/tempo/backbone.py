# SPDX-License-Identifier: Apache-2.0
"""
C3D-shaped feature extractor.

Eight 3x3x3 convolutions (pad 1, ReLU after each) with the C3D pooling
layout, so the output is always ``[C5, L/8, H/16, W/16]`` whatever the
stage widths are.  Parameters live in flat dicts keyed
``"<stream>.<layer>.weight"`` / ``"<stream>.<layer>.bias"``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Mapping, Sequence

import numpy as np

from tempo.errors import DimensionError, DomainError
from tempo.tensor import (
    Tensor,
    concat_channels,
    conv3d,
    elementwise_sum,
    maxpool3d,
    parameter,
    relu,
)

logger = logging.getLogger("tempo.backbone")

CONV_LAYERS: tuple[str, ...] = (
    "conv1a", "conv2a", "conv3a", "conv3b", "conv4a", "conv4b", "conv5a", "conv5b",
)
# Stage index (into the five widths) of each conv layer.
_STAGE = {"conv1a": 0, "conv2a": 1, "conv3a": 2, "conv3b": 2, "conv4a": 3, "conv4b": 3, "conv5a": 4, "conv5b": 4}
POOL_AFTER: dict[str, tuple[int, int, int]] = {
    "conv1a": (1, 2, 2),
    "conv2a": (2, 2, 2),
    "conv3b": (2, 2, 2),
    "conv4b": (2, 2, 2),
}
TIME_FACTOR = 8
SPACE_FACTOR = 16
IN_CHANNELS = {"rgb": 3, "flow": 2}

StreamWeights = dict[str, Tensor]


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...]
    in_channels: int = 3

    def __post_init__(self) -> None:
        if len(self.widths) != 5 or min(self.widths) < 1:
            raise DomainError(f"backbone needs five positive stage widths, got {list(self.widths)}")

    def layer_shapes(self) -> list[tuple[str, tuple[int, int, int, int, int]]]:
        shapes, c_in = [], self.in_channels
        for name in CONV_LAYERS:
            c_out = self.widths[_STAGE[name]]
            shapes.append((name, (c_out, c_in, 3, 3, 3)))
            c_in = c_out
        return shapes

    @property
    def out_channels(self) -> int:
        return self.widths[-1]


def he_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, dtype: type) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)


def init_stream(
    cfg: BackboneConfig,
    prefix: str,
    rng: np.random.Generator,
    dtype: type = np.float64,
) -> StreamWeights:
    params: StreamWeights = {}
    for name, shape in cfg.layer_shapes():
        fan_in = int(np.prod(shape[1:]))
        params[f"{prefix}.{name}.weight"] = parameter(he_uniform(rng, shape, fan_in, dtype), f"{prefix}.{name}.weight")
        params[f"{prefix}.{name}.bias"] = parameter(np.zeros(shape[0], dtype=dtype), f"{prefix}.{name}.bias")
    return params


def pad_flow_time(x: Tensor) -> Tensor:
    """Append one zero frame so an ``L-1`` flow clip lines up with ``L`` RGB frames."""
    padded = np.pad(x.data, ((0, 0), (0, 1), (0, 0), (0, 0)))
    return Tensor(padded, requires_grad=False)


def forward(weights: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    """Run one stream; flow input (``T % 8 == 7``) gets its padding frame first."""
    if x.ndim != 4:
        raise DimensionError(f"backbone expects [C, T, H, W], got {x.shape}", axis="rank")
    if prefix == "flow" and x.shape[1] % TIME_FACTOR == TIME_FACTOR - 1:
        x = pad_flow_time(x)
    _, t, h, w = x.shape
    if t % TIME_FACTOR:
        raise DimensionError(f"temporal extent {t} is not divisible by {TIME_FACTOR}", axis="time")
    if h % SPACE_FACTOR:
        raise DimensionError(f"height {h} is not divisible by {SPACE_FACTOR}", axis="height")
    if w % SPACE_FACTOR:
        raise DimensionError(f"width {w} is not divisible by {SPACE_FACTOR}", axis="width")

    out = x
    for name in CONV_LAYERS:
        out = relu(conv3d(out, weights[f"{prefix}.{name}.weight"], weights[f"{prefix}.{name}.bias"], 1, 1))
        if name in POOL_AFTER:
            out = maxpool3d(out, POOL_AFTER[name])
    return out


def init_flow_from_rgb(rgb: Mapping[str, Tensor]) -> StreamWeights:
    """Flow stream copied from RGB; the first layer averages over input channels."""
    flow: StreamWeights = {}
    for name, tensor in rgb.items():
        if not name.startswith("rgb."):
            continue
        target = "flow." + name[len("rgb."):]
        data = np.array(tensor.data, copy=True)
        if name == "rgb.conv1a.weight":
            if data.shape[1] != IN_CHANNELS["rgb"]:
                raise DimensionError(f"first RGB layer has {data.shape[1]} input channels", axis="channel")
            data = np.repeat(data.mean(axis=1, keepdims=True), IN_CHANNELS["flow"], axis=1)
        flow[target] = parameter(data, target)
    return flow


def fuse(rgb_feat: Tensor, flow_feat: Tensor, mode: Literal["sum", "concat"]) -> Tensor:
    if mode == "sum":
        return elementwise_sum(rgb_feat, flow_feat)
    if mode == "concat":
        return concat_channels(rgb_feat, flow_feat, axis=0)
    raise DomainError(f"unknown fusion mode {mode!r}")


def frozen_names(streams: Sequence[str], first_n: int) -> set[str]:
    """Parameter names of the first ``first_n`` conv layers in each stream."""
    names = set()
    for prefix in streams:
        for layer in CONV_LAYERS[:first_n]:
            names.update({f"{prefix}.{layer}.weight", f"{prefix}.{layer}.bias"})
    return names
