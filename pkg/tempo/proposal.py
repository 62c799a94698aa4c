# SPDX-License-Identifier: Apache-2.0
"""
Temporal proposal subnet: the temporal-only feature map, per-anchor
activity logits and offsets, anchor labelling and batch sampling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from tempo.backbone import he_uniform
from tempo.errors import DimensionError, DomainError
from tempo.geometry import clip_array, decode_array, encode_array, tiou_matrix
from tempo.tensor import Tensor, conv3d, maxpool3d, parameter, permute, relu, reshape, softmax_rows

logger = logging.getLogger("tempo.proposal")

POSITIVE_TIOU = 0.7
NEGATIVE_TIOU = 0.3

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


# ------------------------------------------------------------------ #
#  Head
# ------------------------------------------------------------------ #

def init_head(in_channels: int, k: int, rng: np.random.Generator, dtype: type = np.float64) -> dict[str, Tensor]:
    """3x3x3 conv plus two zero-initialised 1x1x1 convs emitting 2K channels each."""
    conv_shape = (in_channels, in_channels, 3, 3, 3)
    return {
        "tpn.conv.weight": parameter(he_uniform(rng, conv_shape, in_channels * 27, dtype), "tpn.conv.weight"),
        "tpn.conv.bias": parameter(np.zeros(in_channels, dtype=dtype), "tpn.conv.bias"),
        "tpn.score.weight": parameter(np.zeros((2 * k, in_channels, 1, 1, 1), dtype=dtype), "tpn.score.weight"),
        "tpn.score.bias": parameter(np.zeros(2 * k, dtype=dtype), "tpn.score.bias"),
        "tpn.offset.weight": parameter(np.zeros((2 * k, in_channels, 1, 1, 1), dtype=dtype), "tpn.offset.weight"),
        "tpn.offset.bias": parameter(np.zeros(2 * k, dtype=dtype), "tpn.offset.bias"),
    }


def tpn_features(params: Mapping[str, Tensor], c5: Tensor) -> Tensor:
    """``[C, T, H', W']`` -> ``[C, T, 1, 1]``: conv, ReLU, spatial max-pool."""
    feat = relu(conv3d(c5, params["tpn.conv.weight"], params["tpn.conv.bias"], 1, 1))
    _, _, h, w = feat.shape
    return maxpool3d(feat, (1, h, w))


def _per_anchor(out: Tensor, k: int) -> Tensor:
    channels, t = out.shape[0], out.shape[1]
    if channels != 2 * k:
        raise DimensionError(f"head emits {channels} channels, expected 2K = {2 * k}", axis="channel")
    flat = permute(reshape(out, (channels, t)), (1, 0))
    return reshape(flat, (t, k, 2))


def predict(params: Mapping[str, Tensor], tpn: Tensor, k: int) -> tuple[Tensor, Tensor]:
    """Per-anchor (background, activity) logits and (dc, dl) offsets, each ``[T, K, 2]``."""
    scores = conv3d(tpn, params["tpn.score.weight"], params["tpn.score.bias"])
    offsets = conv3d(tpn, params["tpn.offset.weight"], params["tpn.offset.bias"])
    return _per_anchor(scores, k), _per_anchor(offsets, k)


def activity_probability(scores: Tensor) -> np.ndarray:
    """Flattened (location-major) activity probability per anchor."""
    logits = scores.data.reshape(-1, 2)
    return softmax_rows(logits)[:, 1]


def decode_proposals(
    anchors: np.ndarray,
    offsets: Tensor,
    num_frames: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Decoded and clipped proposal bounds plus the non-degenerate mask."""
    decoded = decode_array(anchors, offsets.data.reshape(-1, 2))
    return clip_array(decoded, num_frames)


# ------------------------------------------------------------------ #
#  Training targets
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class AnchorLabeling:
    """``labels`` holds 1 / 0 / -1 per anchor; ``targets`` is meaningful on positives only."""

    labels: np.ndarray
    targets: np.ndarray
    matched: np.ndarray

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)


def assign_anchor_labels(
    anchors: np.ndarray,
    gts: np.ndarray,
    valid: np.ndarray | None = None,
    positive: float = POSITIVE_TIOU,
    negative: float = NEGATIVE_TIOU,
) -> AnchorLabeling:
    """Label anchors against ground truth.

    Positive: tIoU above ``positive`` with some gt, or the best anchor of some
    gt (lowest index on ties, and only when that overlap is non-zero).
    Negative: max tIoU below ``negative`` and not positive.  Anchors outside
    ``valid`` are ignored.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    count = len(anchors)
    valid = np.ones(count, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    targets = np.zeros((count, 2))
    matched = np.full(count, -1, dtype=np.int64)

    if not len(gts):
        labels = np.where(valid, NEGATIVE, IGNORE).astype(np.int64)
        return AnchorLabeling(labels, targets, matched)

    overlap = tiou_matrix(anchors, gts)
    overlap[~valid] = 0.0
    best_gt = overlap.argmax(axis=1)
    best_overlap = overlap[np.arange(count), best_gt]

    is_pos = best_overlap > positive
    best_anchor = overlap.argmax(axis=0)
    forced = best_anchor[overlap[best_anchor, np.arange(len(gts))] > 0]
    is_pos[forced] = True
    is_pos &= valid

    labels = np.full(count, IGNORE, dtype=np.int64)
    labels[(best_overlap < negative) & valid] = NEGATIVE
    labels[is_pos] = POSITIVE

    pos = np.flatnonzero(is_pos)
    if pos.size:
        targets[pos] = encode_array(anchors[pos], gts[best_gt[pos]])
        matched[pos] = best_gt[pos]
    return AnchorLabeling(labels, targets, matched)


# ------------------------------------------------------------------ #
#  Sampling
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class BatchSample:
    indices: np.ndarray
    num_positive: int
    short: bool = False


def sample_balanced(
    labels: np.ndarray,
    batch: int,
    pos_frac: float,
    rng: np.random.Generator,
) -> BatchSample:
    """Positives up to ``batch * pos_frac``, negatives fill the rest.

    ``labels`` uses ``> 0`` for positive/foreground and ``0`` for
    negative/background; anything else is never sampled.
    """
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels > 0)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(pos.size, int(round(batch * pos_frac)))
    n_neg = min(neg.size, batch - n_pos)
    chosen_pos = np.sort(rng.choice(pos, size=n_pos, replace=False)) if n_pos else np.zeros(0, dtype=np.int64)
    chosen_neg = np.sort(rng.choice(neg, size=n_neg, replace=False)) if n_neg else np.zeros(0, dtype=np.int64)
    short = n_pos + n_neg < batch
    if short and n_neg == 0:
        logger.warning("No negatives to sample; batch has %d of %d entries", n_pos, batch)
    elif short:
        logger.debug("Sample short: %d positives + %d negatives < batch %d", n_pos, n_neg, batch)
    return BatchSample(np.concatenate([chosen_pos, chosen_neg]).astype(np.int64), n_pos, short)


def sample_proposal_batch(
    labeling: AnchorLabeling,
    rng: np.random.Generator,
    batch: int = 64,
    pos_frac: float = 0.5,
) -> BatchSample:
    if batch <= 0 or batch % 2:
        raise DomainError(f"proposal batch must be a positive even number, got {batch}")
    return sample_balanced(labeling.labels, batch, pos_frac, rng)
