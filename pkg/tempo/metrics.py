# SPDX-License-Identifier: Apache-2.0
"""
Detection evaluation: tIoU matching, all-point interpolated AP, mAP at a
threshold and averaged over 0.5:0.05:0.95, AR-AN AUC at 100 proposals,
frame-level mAP over 25 timestamps per video, and the report writers.

Everything here works in seconds, the unit of the detections file.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
import pandas as pd
from scipy.ndimage import uniform_filter1d

from tempo.errors import DomainError
from tempo.geometry import score_order, tiou_matrix
from tempo.models import Detection, EvalSummary, Manifest, MetricRow

logger = logging.getLogger("tempo.metrics")

AVERAGE_THRESHOLDS = np.linspace(0.5, 0.95, 10)
MAX_PROPOSALS = 100
FRAME_SAMPLES = 25
ALL = "ALL"

Metric = Literal["map", "avg_map", "auc", "frame_map"]


# ------------------------------------------------------------------ #
#  Matching and AP
# ------------------------------------------------------------------ #

def match_detections(dets: np.ndarray, gts: np.ndarray, alpha: float) -> np.ndarray:
    """Greedy one-to-one matching of score-sorted ``dets`` against ``gts``.

    A detection is a true positive when its best still-unmatched gt has
    tIoU >= ``alpha``; that gt is then used up.
    """
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 2)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    flags = np.zeros(len(dets), dtype=bool)
    if not len(dets) or not len(gts):
        return flags
    overlap = tiou_matrix(dets, gts)
    used = np.zeros(len(gts), dtype=bool)
    for i in range(len(dets)):
        row = np.where(used, -1.0, overlap[i])
        best = int(row.argmax())
        if row[best] >= alpha:
            flags[i] = True
            used[best] = True
    return flags


def average_precision(flags: Sequence[bool] | np.ndarray, num_gt: int) -> float:
    """All-point interpolated AP of a ranked TP/FP list; NaN when ``num_gt`` is 0."""
    if num_gt < 0:
        raise DomainError(f"num_gt must be >= 0, got {num_gt}")
    if num_gt == 0:
        return float("nan")
    flags = np.asarray(flags, dtype=bool)
    if not flags.size:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))


# ------------------------------------------------------------------ #
#  Ground truth lookup
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class GroundTruth:
    """Ground-truth bounds in seconds keyed by (video, class)."""

    segments: dict[tuple[str, int], np.ndarray]
    durations: dict[str, float]
    num_classes: int

    @classmethod
    def from_manifest(cls, manifest: Manifest) -> GroundTruth:
        grouped: dict[tuple[str, int], list[tuple[float, float]]] = defaultdict(list)
        for video in manifest.videos:
            for ann in video.annotations:
                grouped[(video.id, ann.label)].append((ann.start_sec, ann.end_sec))
        return cls(
            segments={key: np.asarray(rows, dtype=np.float64) for key, rows in grouped.items()},
            durations={v.id: v.duration for v in manifest.videos},
            num_classes=len(manifest.classes),
        )

    def of(self, video_id: str, label: int) -> np.ndarray:
        return self.segments.get((video_id, label), np.zeros((0, 2)))

    def count(self, label: int) -> int:
        return sum(len(b) for (_, c), b in self.segments.items() if c == label)

    def videos(self) -> list[str]:
        return list(self.durations)

    def restrict(self, keep: dict[tuple[str, int], np.ndarray]) -> GroundTruth:
        """Same videos, only the gt rows selected by the boolean masks in ``keep``."""
        segments = {key: self.segments[key][mask] for key, mask in keep.items() if mask.any()}
        return GroundTruth(segments, self.durations, self.num_classes)


def _by_class(detections: Iterable[Detection]) -> dict[int, list[Detection]]:
    grouped: dict[int, list[Detection]] = defaultdict(list)
    for det in detections:
        grouped[det.label].append(det)
    return grouped


def class_flags(dets: Sequence[Detection], gt: GroundTruth, label: int, alpha: float) -> np.ndarray:
    """TP flags of one class's detections in global score order."""
    order = score_order(np.asarray([d.score for d in dets]))
    per_video: dict[str, list[int]] = defaultdict(list)
    for rank, idx in enumerate(order):
        per_video[dets[idx].video_id].append(rank)
    flags = np.zeros(len(dets), dtype=bool)
    for video_id, ranks in per_video.items():
        bounds = np.asarray([(dets[order[r]].start_sec, dets[order[r]].end_sec) for r in ranks])
        flags[ranks] = match_detections(bounds, gt.of(video_id, label), alpha)
    return flags


def per_class_ap(detections: Sequence[Detection], gt: GroundTruth, alpha: float) -> dict[int, float]:
    """AP per class that has ground truth."""
    grouped = _by_class(detections)
    out = {}
    for label in range(gt.num_classes):
        num_gt = gt.count(label)
        if num_gt == 0:
            continue
        out[label] = average_precision(class_flags(grouped.get(label, []), gt, label, alpha), num_gt)
    return out


def _mean(values: Iterable[float]) -> float:
    values = [v for v in values if not np.isnan(v)]
    return float(np.mean(values)) if values else 0.0


def map_at(detections: Sequence[Detection], gt: GroundTruth, alpha: float) -> float:
    aps = per_class_ap(detections, gt, alpha)
    if not aps:
        logger.warning("No class has ground truth; mAP@%.2f reported as 0", alpha)
    return _mean(aps.values())


def average_map(detections: Sequence[Detection], gt: GroundTruth) -> float:
    return float(np.mean([map_at(detections, gt, float(a)) for a in AVERAGE_THRESHOLDS]))


# ------------------------------------------------------------------ #
#  Proposals: AR-AN
# ------------------------------------------------------------------ #

def recall_curve(proposals: np.ndarray, gts: np.ndarray, alpha: float, max_n: int = MAX_PROPOSALS) -> np.ndarray:
    """Recall within the top-n ranked proposals for n = 1..max_n."""
    flags = match_detections(proposals[:max_n], gts, alpha)
    hits = np.cumsum(flags)
    curve = np.full(max_n, hits[-1] if hits.size else 0, dtype=np.float64)
    curve[: hits.size] = hits
    return curve / len(gts)


def ar_an_auc(
    proposals: dict[str, np.ndarray],
    gts: dict[str, np.ndarray],
    max_n: int = MAX_PROPOSALS,
    thresholds: Sequence[float] = tuple(AVERAGE_THRESHOLDS),
) -> float:
    """Mean over n = 1..max_n of recall averaged over thresholds and videos.

    ``proposals`` holds score-ranked ``[N, 2]`` bounds per video; videos
    without ground truth are skipped.
    """
    curves = []
    for video_id, video_gts in gts.items():
        if not len(video_gts):
            continue
        ranked = np.asarray(proposals.get(video_id, np.zeros((0, 2))), dtype=np.float64).reshape(-1, 2)
        per_threshold = [recall_curve(ranked, video_gts, float(a), max_n) for a in thresholds]
        curves.append(np.mean(per_threshold, axis=0))
    if not curves:
        return 0.0
    return float(np.mean(np.mean(curves, axis=0)))


def proposals_by_video(detections: Sequence[Detection]) -> dict[str, np.ndarray]:
    """Class-agnostic ranked bounds per video."""
    grouped: dict[str, list[Detection]] = defaultdict(list)
    for det in detections:
        grouped[det.video_id].append(det)
    out = {}
    for video_id, dets in grouped.items():
        order = score_order(np.asarray([d.score for d in dets]))
        out[video_id] = np.asarray([(dets[i].start_sec, dets[i].end_sec) for i in order]).reshape(-1, 2)
    return out


def gts_by_video(gt: GroundTruth) -> dict[str, np.ndarray]:
    out: dict[str, list[np.ndarray]] = {v: [] for v in gt.videos()}
    for (video_id, _), bounds in gt.segments.items():
        out[video_id].append(bounds)
    return {v: np.concatenate(parts) if parts else np.zeros((0, 2)) for v, parts in out.items()}


# ------------------------------------------------------------------ #
#  Frame-level mAP
# ------------------------------------------------------------------ #

def frame_matrices(
    detections: Sequence[Detection],
    gt: GroundTruth,
    num_samples: int = FRAME_SAMPLES,
) -> tuple[np.ndarray, np.ndarray]:
    """``(labels, scores)``, each ``[videos, num_samples, classes]``.

    Timestamps sit at the centres of equal slices of each video.  A
    timestamp takes the highest score of the detections covering it.
    """
    videos = gt.videos()
    index = {v: i for i, v in enumerate(videos)}
    labels = np.zeros((len(videos), num_samples, gt.num_classes))
    scores = np.zeros_like(labels)
    stamps = {v: (np.arange(num_samples) + 0.5) / num_samples * gt.durations[v] for v in videos}

    for (video_id, label), bounds in gt.segments.items():
        t = stamps[video_id]
        inside = ((t[:, None] >= bounds[None, :, 0]) & (t[:, None] < bounds[None, :, 1])).any(axis=1)
        labels[index[video_id], inside, label] = 1.0
    for det in detections:
        if det.video_id not in index or det.label >= gt.num_classes:
            continue
        t = stamps[det.video_id]
        inside = (t >= det.start_sec) & (t < det.end_sec)
        row = scores[index[det.video_id], :, det.label]
        row[inside] = np.maximum(row[inside], det.score)
    return labels, scores


def frame_level_ap(
    detections: Sequence[Detection],
    gt: GroundTruth,
    num_samples: int = FRAME_SAMPLES,
    smooth: int = 0,
) -> dict[int, float]:
    """Per-class AP over timestamps; ``smooth`` > 1 averages scores over that many timestamps."""
    labels, scores = frame_matrices(detections, gt, num_samples)
    if smooth > 1:
        scores = uniform_filter1d(scores, size=smooth, axis=1, mode="nearest")
    out = {}
    for c in range(gt.num_classes):
        y = labels[:, :, c].ravel()
        s = scores[:, :, c].ravel()
        num_gt = int(y.sum())
        if num_gt == 0:
            continue
        ranked = np.flatnonzero(s > 0)
        ranked = ranked[score_order(s[ranked])]
        out[c] = average_precision(y[ranked] > 0, num_gt)
    return out


def frame_level_map(
    detections: Sequence[Detection],
    gt: GroundTruth,
    num_samples: int = FRAME_SAMPLES,
    smooth: int = 0,
) -> float:
    return _mean(frame_level_ap(detections, gt, num_samples, smooth).values())


# ------------------------------------------------------------------ #
#  Duration groups
# ------------------------------------------------------------------ #

DURATION_GROUPS = ("short", "medium", "long")


def duration_groups(gt: GroundTruth) -> dict[str, GroundTruth]:
    """Three equal-count ground-truth groups by duration, shortest first."""
    keys, rows, lengths = [], [], []
    for key, bounds in gt.segments.items():
        for r, (s, e) in enumerate(bounds):
            keys.append(key)
            rows.append(r)
            lengths.append(e - s)
    order = np.argsort(np.asarray(lengths), kind="stable")
    out = {}
    for name, part in zip(DURATION_GROUPS, np.array_split(order, 3)):
        masks = {key: np.zeros(len(b), dtype=bool) for key, b in gt.segments.items()}
        for i in part:
            masks[keys[i]][rows[i]] = True
        out[name] = gt.restrict(masks)
    return out


def _attribute(detections: Sequence[Detection], gt: GroundTruth, group: GroundTruth) -> list[Detection]:
    """Detections whose best-overlap gt is in ``group``, plus those overlapping no gt."""
    kept = []
    for det in detections:
        everything = gt.of(det.video_id, det.label)
        if not len(everything):
            kept.append(det)
            continue
        overlap = tiou_matrix([(det.start_sec, det.end_sec)], everything)[0]
        if overlap.max() <= 0:
            kept.append(det)
            continue
        best = everything[int(overlap.argmax())]
        mine = group.of(det.video_id, det.label)
        if len(mine) and (np.abs(mine - best).sum(axis=1) == 0).any():
            kept.append(det)
    return kept


def map_by_duration(detections: Sequence[Detection], gt: GroundTruth, alpha: float) -> dict[str, float]:
    out = {}
    for name, group in duration_groups(gt).items():
        out[name] = map_at(_attribute(detections, gt, group), group, alpha)
    return out


# ------------------------------------------------------------------ #
#  Reports
# ------------------------------------------------------------------ #

def evaluate(
    detections: Sequence[Detection],
    manifest: Manifest,
    metric: Metric = "map",
    alphas: Sequence[float] = (0.5,),
    smooth: int = 0,
) -> list[MetricRow]:
    """Report rows: the overall value plus per-class (and per-duration) breakdowns.

    AR-AN scores the ``kind="proposal"`` rows when present; every other
    metric ignores them.
    """
    gt = GroundTruth.from_manifest(manifest)
    names = manifest.classes
    rows: list[MetricRow] = []
    proposals = [det for det in detections if det.is_proposal]
    detections = [det for det in detections if not det.is_proposal]

    def class_rows(name: str, aps: dict[int, float], alpha: float | None) -> None:
        rows.append(MetricRow(metric=name, class_or_all=ALL, alpha=alpha, value=_mean(aps.values())))
        for label, ap in aps.items():
            rows.append(MetricRow(metric=name, class_or_all=names[label], alpha=alpha, value=ap))

    if metric == "map":
        for alpha in alphas:
            class_rows("map", per_class_ap(detections, gt, alpha), alpha)
            for group, value in map_by_duration(detections, gt, alpha).items():
                rows.append(MetricRow(metric=f"map_{group}", class_or_all=ALL, alpha=alpha, value=value))
    elif metric == "avg_map":
        per_alpha = [per_class_ap(detections, gt, float(a)) for a in AVERAGE_THRESHOLDS]
        labels = sorted(per_alpha[0]) if per_alpha else []
        averaged = {label: float(np.mean([aps[label] for aps in per_alpha])) for label in labels}
        rows.append(
            MetricRow(metric="avg_map", class_or_all=ALL, alpha=None,
                      value=float(np.mean([_mean(aps.values()) for aps in per_alpha])))
        )
        for label, value in averaged.items():
            rows.append(MetricRow(metric="avg_map", class_or_all=names[label], alpha=None, value=value))
    elif metric == "auc":
        # Detector output stands in for proposals when none were written.
        value = ar_an_auc(proposals_by_video(proposals or detections), gts_by_video(gt))
        rows.append(MetricRow(metric="ar_an_auc", class_or_all=ALL, alpha=None, value=value))
    elif metric == "frame_map":
        class_rows("frame_map", frame_level_ap(detections, gt, smooth=smooth), None)
    else:
        raise DomainError(f"unknown metric {metric!r}")
    return rows


def write_report(
    rows: Sequence[MetricRow],
    out_dir: str | Path,
    detections_path: str,
    manifest_path: str,
    metric: str,
) -> tuple[Path, Path]:
    """``report.csv`` with every row and ``summary.json`` with the ALL rows."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([row.model_dump() for row in rows], columns=["metric", "class_or_all", "alpha", "value"])
    csv_path = out_dir / "report.csv"
    frame.to_csv(csv_path, index=False)

    headline = {}
    for row in rows:
        if row.class_or_all == ALL:
            key = row.metric if row.alpha is None else f"{row.metric}@{row.alpha:g}"
            headline[key] = row.value
    summary = EvalSummary(detections=detections_path, manifest=manifest_path, metric=metric, rows=headline)
    json_path = out_dir / "summary.json"
    json_path.write_text(summary.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Report written: %s, %s", csv_path, json_path)
    return csv_path, json_path
