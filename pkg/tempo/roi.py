# SPDX-License-Identifier: Apache-2.0
"""
3D RoI max pooling: a variable-length temporal proposal over the full
spatial extent of a ``[C, T, H', W']`` feature map is pooled into a fixed
``l_s x h_s x w_s`` grid.  Argmax positions are kept for the backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from tempo.errors import DimensionError, DomainError
from tempo.geometry import TEMPORAL_STRIDE, Segment
from tempo.tensor import Tensor, record, reshape


@dataclass(frozen=True)
class RoiGrid:
    length: int = 1
    height: int = 2
    width: int = 2

    def __post_init__(self) -> None:
        if min(self.length, self.height, self.width) < 1:
            raise DomainError(f"RoI grid components must be >= 1, got {self.as_tuple()}")

    @classmethod
    def of(cls, grid: Sequence[int]) -> RoiGrid:
        if len(grid) != 3:
            raise DimensionError(f"RoI grid needs three components, got {list(grid)}")
        return cls(*(int(g) for g in grid))

    def as_tuple(self) -> tuple[int, int, int]:
        return self.length, self.height, self.width

    @property
    def cells(self) -> int:
        return self.length * self.height * self.width


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def bin_ranges(lo: int, hi: int, bins: int) -> list[tuple[int, int]]:
    """Split cells ``[lo, hi)`` into ``bins`` contiguous ranges; empty ones borrow a cell."""
    span = hi - lo
    out = []
    for k in range(bins):
        start = lo + _round_half_up(k * span / bins)
        end = lo + _round_half_up((k + 1) * span / bins)
        if end <= start:
            cell = min(start, hi - 1)
            start, end = cell, cell + 1
        out.append((start, end))
    return out


def feature_span(bounds: tuple[float, float], extent: int, stride: int = TEMPORAL_STRIDE) -> tuple[int, int]:
    """Frame bounds -> feature cells, rounded outward and clamped to ``[0, extent)``."""
    start, end = bounds
    if end <= 0 or start >= extent * stride or end <= start:
        raise DomainError(f"proposal [{start}, {end}) lies outside the {extent}-cell feature map")
    lo = max(0, math.floor(start / stride))
    hi = min(extent, math.ceil(end / stride))
    return lo, max(hi, lo + 1)


def roi_pool_batch(feat: Tensor, bounds: np.ndarray, grid: RoiGrid, stride: int = TEMPORAL_STRIDE) -> Tensor:
    """Pool every ``[N, 2]`` frame-unit proposal; returns ``[N, C, l_s, h_s, w_s]``."""
    if feat.ndim != 4:
        raise DimensionError(f"RoI pooling expects [C, T, H, W], got {feat.shape}", axis="rank")
    bounds = np.asarray(bounds, dtype=np.float64).reshape(-1, 2)
    c, t, h, w = feat.shape
    ls, hs, ws = grid.as_tuple()
    h_bins = bin_ranges(0, h, hs)
    w_bins = bin_ranges(0, w, ws)
    data = feat.data
    channel_base = np.arange(c) * (t * h * w)

    out = np.zeros((len(bounds), c, ls, hs, ws), dtype=feat.dtype)
    argmax = np.zeros(out.shape, dtype=np.int64)
    for n, row in enumerate(bounds):
        lo, hi = feature_span((float(row[0]), float(row[1])), t, stride)
        for i, (t0, t1) in enumerate(bin_ranges(lo, hi, ls)):
            for j, (h0, h1) in enumerate(h_bins):
                for k, (w0, w1) in enumerate(w_bins):
                    window = data[:, t0:t1, h0:h1, w0:w1].reshape(c, -1)
                    local = window.argmax(axis=1)
                    out[n, :, i, j, k] = window[np.arange(c), local]
                    dt, rem = np.divmod(local, (h1 - h0) * (w1 - w0))
                    dh, dw = np.divmod(rem, w1 - w0)
                    argmax[n, :, i, j, k] = channel_base + ((t0 + dt) * h + (h0 + dh)) * w + (w0 + dw)

    flat = argmax.ravel()

    def backward_fn(g: np.ndarray):
        gx = np.bincount(flat, weights=g.ravel(), minlength=feat.size)
        return (gx.astype(feat.dtype, copy=False).reshape(feat.shape),)

    return record("roi_pool_3d", (feat,), out, backward_fn)


def roi_pool_3d(feat: Tensor, proposal: Segment, grid: RoiGrid, stride: int = TEMPORAL_STRIDE) -> Tensor:
    pooled = roi_pool_batch(feat, np.asarray([proposal.bounds()]), grid, stride)
    return reshape(pooled, pooled.shape[1:])
