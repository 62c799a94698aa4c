# SPDX-License-Identifier: Apache-2.0
"""
Activity classification subnet: proposal selection, proposal labelling and
sampling, the per-stream FC stacks with the fused class/offset layers, and
online hard example mining.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from types import MappingProxyType
from typing import Literal, Mapping, Sequence

import numpy as np

from tempo.backbone import he_uniform
from tempo.errors import DimensionError
from tempo.geometry import ScoredSegment, encode_array, nms, nms_indices, tiou_matrix
from tempo.proposal import BatchSample, sample_balanced
from tempo.tensor import (
    Tensor,
    concat_channels,
    cross_entropy_rows,
    elementwise_sum,
    linear,
    no_grad,
    parameter,
    relu,
    reshape,
    smooth_l1_rows,
    take_rows,
)

logger = logging.getLogger("tempo.classifier")

FOREGROUND_TIOU = 0.5
PROPOSAL_NMS = 0.7


# ------------------------------------------------------------------ #
#  Proposal selection and labelling
# ------------------------------------------------------------------ #

def select_proposal_indices(
    bounds: np.ndarray,
    scores: np.ndarray,
    max_n: int,
    threshold: float = PROPOSAL_NMS,
) -> np.ndarray:
    if not len(bounds):
        return np.zeros(0, dtype=np.int64)
    return nms_indices(bounds, scores, threshold)[:max_n]


def select_proposals(
    scored: Sequence[ScoredSegment],
    max_n: int,
    threshold: float = PROPOSAL_NMS,
) -> list[ScoredSegment]:
    """NMS, then the ``max_n`` best by score."""
    return nms(scored, threshold)[:max_n]


@dataclass(frozen=True)
class ProposalLabeling:
    """``labels``: 0 is background, ``c + 1`` is ground-truth class ``c``."""

    labels: np.ndarray
    targets: np.ndarray
    matched: np.ndarray

    @property
    def foreground(self) -> np.ndarray:
        return self.labels > 0


def assign_proposal_labels(
    proposals: np.ndarray,
    gts: np.ndarray,
    gt_labels: np.ndarray,
    threshold: float = FOREGROUND_TIOU,
) -> ProposalLabeling:
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 2)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    count = len(proposals)
    labels = np.zeros(count, dtype=np.int64)
    targets = np.zeros((count, 2))
    matched = np.full(count, -1, dtype=np.int64)
    if not len(gts) or not count:
        return ProposalLabeling(labels, targets, matched)

    overlap = tiou_matrix(proposals, gts)
    best = overlap.argmax(axis=1)
    fg = overlap[np.arange(count), best] > threshold
    labels[fg] = np.asarray(gt_labels, dtype=np.int64)[best[fg]] + 1
    if fg.any():
        targets[fg] = encode_array(proposals[fg], gts[best[fg]])
        matched[fg] = best[fg]
    return ProposalLabeling(labels, targets, matched)


def sample_cls_batch(
    labeling: ProposalLabeling,
    rng: np.random.Generator,
    batch: int = 128,
    pos_frac: float = 0.25,
) -> BatchSample:
    return sample_balanced(labeling.labels, batch, pos_frac, rng)


# ------------------------------------------------------------------ #
#  Head
# ------------------------------------------------------------------ #

def offset_rows(num_classes: int, class_agnostic: bool) -> int:
    return 1 if class_agnostic else num_classes


def init_head(
    in_features: int,
    hidden: int,
    num_classes: int,
    streams: Sequence[str],
    fusion: Literal["sum", "concat"],
    class_agnostic: bool,
    rng: np.random.Generator,
    dtype: type = np.float64,
) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for stream in streams:
        for layer, (d_in, d_out) in (("fc1", (in_features, hidden)), ("fc2", (hidden, hidden))):
            name = f"cls.{stream}.{layer}"
            params[f"{name}.weight"] = parameter(he_uniform(rng, (d_in, d_out), d_in, dtype), f"{name}.weight")
            params[f"{name}.bias"] = parameter(np.zeros(d_out, dtype=dtype), f"{name}.bias")
    fused = hidden * (len(streams) if fusion == "concat" else 1)
    rows = offset_rows(num_classes, class_agnostic)
    params["cls.score.weight"] = parameter(np.zeros((fused, num_classes + 1), dtype=dtype), "cls.score.weight")
    params["cls.score.bias"] = parameter(np.zeros(num_classes + 1, dtype=dtype), "cls.score.bias")
    params["cls.offset.weight"] = parameter(np.zeros((fused, 2 * rows), dtype=dtype), "cls.offset.weight")
    params["cls.offset.bias"] = parameter(np.zeros(2 * rows, dtype=dtype), "cls.offset.bias")
    return params


def stream_hidden(params: Mapping[str, Tensor], stream: str, pooled: Tensor) -> Tensor:
    """Two FC + ReLU layers over flattened ``[N, D]`` pooled features."""
    weight = params[f"cls.{stream}.fc1.weight"]
    if pooled.ndim != 2 or pooled.shape[1] != weight.shape[0]:
        raise DimensionError(f"pooled features {pooled.shape} do not match fc1 width {weight.shape[0]}", axis="feature")
    x = relu(linear(pooled, weight, params[f"cls.{stream}.fc1.bias"]))
    return relu(linear(x, params[f"cls.{stream}.fc2.weight"], params[f"cls.{stream}.fc2.bias"]))


def classify(
    params: Mapping[str, Tensor],
    pooled: Mapping[str, Tensor],
    fusion: Literal["sum", "concat"] = "sum",
) -> tuple[Tensor, Tensor]:
    """``(logits [N, C+1], offsets [N, R, 2])`` with R = C, or 1 when class-agnostic.

    ``pooled`` maps stream name to its flattened RoI features; with two
    streams the hidden activations are fused before the final layers.
    """
    hidden = [stream_hidden(params, stream, feats) for stream, feats in pooled.items()]
    fused = hidden[0]
    for other in hidden[1:]:
        fused = elementwise_sum(fused, other) if fusion == "sum" else concat_channels(fused, other, axis=1)
    logits = linear(fused, params["cls.score.weight"], params["cls.score.bias"])
    raw = linear(fused, params["cls.offset.weight"], params["cls.offset.bias"])
    return logits, reshape(raw, (raw.shape[0], raw.shape[1] // 2, 2))


def gather_offsets(offsets: Tensor, labels: np.ndarray) -> Tensor:
    """Offsets of each row's own class as ``[N, 2]``; background rows read class 0."""
    n, rows, _ = offsets.shape
    labels = np.asarray(labels, dtype=np.int64)
    cls = np.zeros_like(labels) if rows == 1 else np.maximum(labels - 1, 0)
    flat = reshape(offsets, (n * rows, 2))
    return take_rows(flat, np.arange(n) * rows + cls)


def offsets_for(offsets: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Tape-free version of :func:`gather_offsets`."""
    rows = offsets.shape[1]
    labels = np.asarray(labels, dtype=np.int64)
    cls = np.zeros_like(labels) if rows == 1 else np.maximum(labels - 1, 0)
    return offsets[np.arange(len(labels)), cls]


# ------------------------------------------------------------------ #
#  Online hard example mining
# ------------------------------------------------------------------ #

def readonly_view(params: dict[str, Tensor]) -> Mapping[str, Tensor]:
    """Read-only proxy over the live parameter dict; it sees every update."""
    return MappingProxyType(params)


def hardest(losses: np.ndarray, top_n: int) -> np.ndarray:
    """Indices of the ``top_n`` largest losses; equal losses keep index order."""
    order = np.argsort(-np.asarray(losses, dtype=np.float64), kind="stable")
    return order[:top_n]


def example_losses(
    logits: np.ndarray,
    offsets: np.ndarray,
    labeling: ProposalLabeling,
    lam: float = 1.0,
) -> np.ndarray:
    """Per-proposal cross-entropy plus ``lam`` times smooth L1 on foreground rows."""
    loss = cross_entropy_rows(logits, labeling.labels)
    fg = labeling.foreground
    if fg.any():
        reg = smooth_l1_rows(offsets_for(offsets, labeling.labels)[fg], labeling.targets[fg])
        loss = loss.copy()
        loss[fg] += lam * reg
    return loss


def ohem_select(
    readonly_head: Mapping[str, Tensor],
    pooled: Mapping[str, Tensor],
    labeling: ProposalLabeling,
    fusion: Literal["sum", "concat"] = "sum",
    top_n: int = 128,
    lam: float = 1.0,
) -> np.ndarray:
    """Score every proposal without recording gradients; keep the hardest ``top_n``."""
    with no_grad():
        detached = {stream: feats.detach() for stream, feats in pooled.items()}
        logits, offsets = classify(readonly_head, detached, fusion)
    losses = example_losses(logits.data, offsets.data, labeling, lam)
    chosen = hardest(losses, top_n)
    logger.debug("OHEM kept %d of %d proposals", chosen.size, losses.size)
    return chosen
