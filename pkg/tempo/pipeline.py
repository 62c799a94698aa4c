# SPDX-License-Identifier: Apache-2.0
"""
Forward graph wiring for single- and two-stream models, and inference.

Two-stream models fuse conv5b features before the proposal subnet, pool
each stream's own conv5b on the shared proposals, and fuse the per-stream
FC activations before the final class/offset layers.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal, Mapping

import numpy as np

from tempo import backbone, classifier, proposal
from tempo.config import NetworkConfig, settings
from tempo.dataset import Buffer, Dataset, VideoSample, build_buffers
from tempo.errors import DomainError
from tempo.geometry import AnchorConfig, anchor_array, clip_array, decode_array, nms_indices
from tempo.metrics import MAX_PROPOSALS
from tempo.models import Detection
from tempo.roi import RoiGrid, roi_pool_batch
from tempo.tensor import Tensor, no_grad, reshape, softmax_rows

logger = logging.getLogger("tempo.pipeline")


def streams_for(cfg: NetworkConfig) -> tuple[str, ...]:
    return ("rgb", "flow") if cfg.two_stream else ("rgb",)


def init_params(cfg: NetworkConfig, rng: np.random.Generator, dtype: type = np.float64) -> dict[str, Tensor]:
    """Fresh weights; the flow stream starts as the channel-averaged RGB stream."""
    params = backbone.init_stream(backbone.BackboneConfig(tuple(cfg.widths), 3), "rgb", rng, dtype)
    if cfg.two_stream:
        params.update(backbone.init_flow_from_rgb(params))
    c5 = cfg.widths[-1]
    tpn_channels = c5 * (2 if cfg.two_stream and cfg.fusion == "concat" else 1)
    params.update(proposal.init_head(tpn_channels, cfg.k, rng, dtype))
    in_features = c5 * RoiGrid.of(cfg.roi_grid).cells
    params.update(
        classifier.init_head(
            in_features, cfg.hidden, cfg.num_classes, streams_for(cfg), cfg.fusion, cfg.class_agnostic, rng, dtype
        )
    )
    return params


# ------------------------------------------------------------------ #
#  Forward graph
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class ProposalOutput:
    scores: Tensor
    offsets: Tensor
    anchors: np.ndarray
    valid: np.ndarray

    def candidates(self, num_frames: float) -> tuple[np.ndarray, np.ndarray]:
        """Decoded, clipped proposal bounds and activity probabilities of usable anchors."""
        bounds, keep = proposal.decode_proposals(self.anchors, self.offsets, num_frames)
        probs = proposal.activity_probability(self.scores)
        keep &= self.valid
        return bounds[keep], probs[keep]


@dataclass(frozen=True)
class GraphOutput:
    proposals: ProposalOutput
    rois: np.ndarray
    logits: Tensor
    offsets: Tensor


def anchors_for(cfg: NetworkConfig, num_frames: int) -> tuple[np.ndarray, np.ndarray]:
    anchors = anchor_array(AnchorConfig(scales=cfg.anchor_scales), num_frames)
    if cfg.clip_anchors:
        return clip_array(anchors, num_frames)
    return anchors, np.ones(len(anchors), dtype=bool)


def encode_streams(
    params: Mapping[str, Tensor],
    cfg: NetworkConfig,
    rgb: Tensor,
    flow: Tensor | None = None,
) -> dict[str, Tensor]:
    feats = {"rgb": backbone.forward(params, "rgb", rgb)}
    if cfg.two_stream:
        if flow is None:
            raise DomainError(f"mode {cfg.mode} needs a flow input")
        feats["flow"] = backbone.forward(params, "flow", flow)
    return feats


def propose(params: Mapping[str, Tensor], cfg: NetworkConfig, feats: Mapping[str, Tensor], num_frames: int) -> ProposalOutput:
    fused = feats["rgb"]
    if "flow" in feats:
        fused = backbone.fuse(feats["rgb"], feats["flow"], cfg.fusion)
    scores, offsets = proposal.predict(params, proposal.tpn_features(params, fused), cfg.k)
    anchors, valid = anchors_for(cfg, num_frames)
    return ProposalOutput(scores, offsets, anchors, valid)


def pool_streams(feats: Mapping[str, Tensor], rois: np.ndarray, grid: RoiGrid) -> dict[str, Tensor]:
    """Per-stream RoI features flattened to ``[N, C * cells]``."""
    pooled = {}
    for stream, feat in feats.items():
        out = roi_pool_batch(feat, rois, grid)
        pooled[stream] = reshape(out, (out.shape[0], int(np.prod(out.shape[1:]))))
    return pooled


def classify_proposals(
    params: Mapping[str, Tensor],
    cfg: NetworkConfig,
    feats: Mapping[str, Tensor],
    rois: np.ndarray,
) -> tuple[Tensor, Tensor]:
    pooled = pool_streams(feats, rois, RoiGrid.of(cfg.roi_grid))
    return classifier.classify(params, pooled, cfg.fusion)


def forward_graph(
    params: Mapping[str, Tensor],
    cfg: NetworkConfig,
    rgb: Tensor,
    flow: Tensor | None = None,
    rois: np.ndarray | None = None,
    top_n: int | None = None,
) -> GraphOutput:
    """Backbone(s), proposal subnet, proposal selection and classification.

    Pass ``rois`` to classify a fixed proposal set instead of the selected one.
    """
    num_frames = rgb.shape[1]
    feats = encode_streams(params, cfg, rgb, flow)
    out = propose(params, cfg, feats, num_frames)
    if rois is None:
        bounds, probs = out.candidates(num_frames)
        keep = classifier.select_proposal_indices(bounds, probs, top_n or cfg.test_top_n, cfg.nms_threshold)
        rois = bounds[keep]
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 2)
    logits, offsets = classify_proposals(params, cfg, feats, rois)
    return GraphOutput(out, rois, logits, offsets)


# ------------------------------------------------------------------ #
#  Inference
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class RawDetections:
    """Per-buffer detections in video frames, before the final NMS."""

    bounds: np.ndarray
    labels: np.ndarray
    scores: np.ndarray

    @classmethod
    def empty(cls) -> RawDetections:
        return cls(np.zeros((0, 2)), np.zeros(0, dtype=np.int64), np.zeros(0))

    @classmethod
    def concat(cls, parts: list[RawDetections]) -> RawDetections:
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.bounds for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.scores for p in parts]),
        )


def detect_buffer(params: Mapping[str, Tensor], cfg: NetworkConfig, buf: Buffer) -> RawDetections:
    """One buffer: the best non-background class per proposal, refined by that class's offsets."""
    with no_grad():
        graph = forward_graph(params, cfg, buf.rgb, buf.flow if cfg.two_stream else None)
    if not len(graph.rois):
        return RawDetections.empty()
    probs = softmax_rows(graph.logits.data)
    predicted = probs.argmax(axis=1)
    fg = predicted > 0
    if not fg.any():
        return RawDetections.empty()
    labels = predicted[fg]
    deltas = classifier.offsets_for(graph.offsets.data[fg], labels)
    refined, keep = clip_array(decode_array(graph.rois[fg], deltas), buf.num_valid)
    rows = np.flatnonzero(keep)
    return RawDetections(
        bounds=refined[rows] + buf.start_frame,
        labels=labels[rows] - 1,
        scores=probs[fg][rows, labels[rows]],
    )


def final_threshold(alpha: float) -> float:
    return float(np.clip(alpha - 0.1, 0.0, 1.0))


def per_class_nms(raw: RawDetections, threshold: float) -> RawDetections:
    parts = []
    for label in np.unique(raw.labels):
        idx = np.flatnonzero(raw.labels == label)
        kept = idx[nms_indices(raw.bounds[idx], raw.scores[idx], threshold)]
        parts.append(RawDetections(raw.bounds[kept], raw.labels[kept], raw.scores[kept]))
    merged = RawDetections.concat(parts)
    order = np.lexsort((np.arange(len(merged.scores)), -merged.scores))
    return RawDetections(merged.bounds[order], merged.labels[order], merged.scores[order])


def _finish(raw: RawDetections, num_frames: int, alpha: float) -> RawDetections:
    bounds, keep = clip_array(raw.bounds, num_frames)
    raw = RawDetections(bounds[keep], raw.labels[keep], raw.scores[keep])
    return per_class_nms(raw, final_threshold(alpha))


def detect(
    params: Mapping[str, Tensor],
    cfg: NetworkConfig,
    sample: VideoSample,
    alpha: float = 0.5,
) -> RawDetections:
    """Class-labelled detections for one video in frame units, best first."""
    buffers = build_buffers(sample, cfg.buffer_len)
    raw = RawDetections.concat([detect_buffer(params, cfg, buf) for buf in buffers])
    return _finish(raw, sample.num_frames, alpha)


# ------------------------------------------------------------------ #
#  Proposals
# ------------------------------------------------------------------ #

def propose_buffer(
    params: Mapping[str, Tensor],
    cfg: NetworkConfig,
    buf: Buffer,
    max_n: int = MAX_PROPOSALS,
) -> RawDetections:
    """Class-agnostic proposals of one buffer in video frames, after NMS."""
    with no_grad():
        feats = encode_streams(params, cfg, buf.rgb, buf.flow if cfg.two_stream else None)
        out = propose(params, cfg, feats, buf.length)
    bounds, probs = out.candidates(buf.length)
    bounds, keep = clip_array(bounds, buf.num_valid)
    bounds, probs = bounds[keep], probs[keep]
    rows = classifier.select_proposal_indices(bounds, probs, max_n, cfg.nms_threshold)
    return RawDetections(bounds[rows] + buf.start_frame, np.zeros(len(rows), dtype=np.int64), probs[rows])


def propose_video(
    params: Mapping[str, Tensor],
    cfg: NetworkConfig,
    sample: VideoSample,
    max_n: int = MAX_PROPOSALS,
) -> RawDetections:
    """At most ``max_n`` ranked proposals per video, merged across buffers with one more NMS."""
    buffers = build_buffers(sample, cfg.buffer_len)
    raw = RawDetections.concat([propose_buffer(params, cfg, buf, max_n) for buf in buffers])
    bounds, keep = clip_array(raw.bounds, sample.num_frames)
    bounds, scores = bounds[keep], raw.scores[keep]
    rows = classifier.select_proposal_indices(bounds, scores, max_n, cfg.nms_threshold)
    return RawDetections(bounds[rows], np.zeros(len(rows), dtype=np.int64), scores[rows])


def random_detections(
    cfg: NetworkConfig,
    sample: VideoSample,
    rng: np.random.Generator,
    alpha: float = 0.5,
) -> RawDetections:
    """Baseline: shuffled anchor segments with random classes and scores."""
    parts = []
    for buf in build_buffers(sample, cfg.buffer_len):
        anchors, valid = anchors_for(cfg, buf.length)
        anchors = anchors[valid][rng.permutation(int(valid.sum()))]
        clipped, keep = clip_array(anchors, buf.num_valid)
        count = int(keep.sum())
        parts.append(
            RawDetections(
                bounds=clipped[keep] + buf.start_frame,
                labels=rng.integers(0, cfg.num_classes, size=count),
                scores=rng.random(count),
            )
        )
    return _finish(RawDetections.concat(parts), sample.num_frames, alpha)


def to_records(
    video_id: str,
    fps: float,
    raw: RawDetections,
    kind: Literal["detection", "proposal"] = "detection",
) -> list[Detection]:
    return [
        Detection(
            video_id=video_id,
            label=int(label),
            start_sec=float(b[0]) / fps,
            end_sec=float(b[1]) / fps,
            score=float(np.clip(score, 0.0, 1.0)),
            kind=kind,
        )
        for b, label, score in zip(raw.bounds, raw.labels, raw.scores)
    ]


def detect_dataset(
    params: Mapping[str, Tensor],
    cfg: NetworkConfig,
    dataset: Dataset,
    alpha: float = 0.5,
    dtype: type = np.float64,
    random_baseline: bool = False,
    seed: int = 7,
    proposals: bool = False,
) -> list[Detection]:
    """Detect over every video with a thread pool; output keeps manifest order.

    With ``proposals`` the rows are the ranked class-agnostic proposals instead.
    """

    def run(index: int) -> list[Detection]:
        sample = dataset.sample(index, dtype)
        if proposals:
            raw = propose_video(params, cfg, sample)
            logger.debug("Video %s: %d proposals", sample.id, len(raw.scores))
            return to_records(sample.id, sample.fps, raw, kind="proposal")
        if random_baseline:
            raw = random_detections(cfg, sample, np.random.default_rng(seed ^ index), alpha)
        else:
            raw = detect(params, cfg, sample, alpha)
        logger.debug("Video %s: %d detections", sample.id, len(raw.scores))
        return to_records(sample.id, sample.fps, raw)

    with ThreadPoolExecutor(max_workers=settings.worker_count) as pool:
        per_video = list(pool.map(run, range(len(dataset))))
    detections = [det for chunk in per_video for det in chunk]
    logger.info("Detected %d segments over %d videos", len(detections), len(dataset))
    return detections
