# SPDX-License-Identifier: Apache-2.0
"""
Joint training of both subnets.

Each step takes one buffer: the proposal subnet is trained on a balanced
anchor sample, the classification subnet on sampled (or OHEM-mined)
proposals, and the four loss terms are summed into one objective that is
minimised with momentum SGD and weight decay.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
import pandas as pd

from tempo import classifier, pipeline, proposal
from tempo.backbone import frozen_names
from tempo.config import NetworkConfig, TrainConfig
from tempo.dataset import Buffer, Dataset, build_buffers
from tempo.errors import DataError, DimensionError, NonFiniteGradientError
from tempo.models import TrainSummary
from tempo.roi import RoiGrid
from tempo.storage import load_checkpoint, save_checkpoint
from tempo.tensor import (
    Tape,
    Tensor,
    add_scalars,
    reshape,
    scale,
    smooth_l1_sum,
    softmax_cross_entropy,
    take_rows,
)

logger = logging.getLogger("tempo.train")

LOG_COLUMNS = ["iteration", "lr", "prop_cls_loss", "prop_reg_loss", "cls_cls_loss", "cls_reg_loss", "total"]
CHECKPOINT_FORMAT = 1


# ------------------------------------------------------------------ #
#  Losses
# ------------------------------------------------------------------ #

def smooth_l1(pred: Tensor, target: np.ndarray) -> Tensor:
    """Smooth L1 summed over coordinates, averaged over rows; zero for no rows."""
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    if pred.shape[0] == 0:
        return Tensor(np.zeros((), dtype=pred.dtype))
    return scale(smooth_l1_sum(pred, target), 1.0 / pred.shape[0])


@dataclass(frozen=True)
class LossTerms:
    total: Tensor
    cls: Tensor
    reg: Tensor


def joint_loss(
    cls_logits: Tensor,
    cls_labels: np.ndarray,
    reg_pred: Tensor,
    reg_targets: np.ndarray,
    fg_mask: np.ndarray,
    lam: float = 1.0,
) -> LossTerms:
    """Mean cross-entropy plus ``lam`` times smooth L1 over foreground rows."""
    fg_mask = np.asarray(fg_mask, dtype=bool)
    if reg_pred.shape[0] != cls_logits.shape[0] or fg_mask.shape != (cls_logits.shape[0],):
        raise DimensionError(
            f"{cls_logits.shape[0]} logit rows, {reg_pred.shape[0]} offset rows, {fg_mask.shape} mask",
            axis="batch",
        )
    cls_term = softmax_cross_entropy(cls_logits, cls_labels)
    fg = np.flatnonzero(fg_mask)
    reg_term = smooth_l1(take_rows(reg_pred, fg), np.asarray(reg_targets)[fg])
    return LossTerms(add_scalars(cls_term, scale(reg_term, lam)), cls_term, reg_term)


@dataclass(frozen=True)
class StepLosses:
    proposal: LossTerms
    classification: LossTerms

    @property
    def total(self) -> Tensor:
        return add_scalars(self.proposal.total, self.classification.total)

    def row(self) -> dict[str, float]:
        return {
            "prop_cls_loss": self.proposal.cls.item(),
            "prop_reg_loss": self.proposal.reg.item(),
            "cls_cls_loss": self.classification.cls.item(),
            "cls_reg_loss": self.classification.reg.item(),
        }


def compute_losses(
    params: dict[str, Tensor],
    net: NetworkConfig,
    cfg: TrainConfig,
    buf: Buffer,
    rng: np.random.Generator,
    proposals: np.ndarray | None = None,
) -> StepLosses:
    """Forward one buffer and build both subnets' loss terms.

    Proposal coordinates are constants for the classification stage.  Pass
    ``proposals`` to pin the classifier's proposal set.
    """
    num_frames = buf.length
    feats = pipeline.encode_streams(params, net, buf.rgb, buf.flow if net.two_stream else None)
    out = pipeline.propose(params, net, feats, num_frames)

    # Proposal subnet
    labeling = proposal.assign_anchor_labels(out.anchors, buf.gt_bounds, out.valid)
    picked = proposal.sample_proposal_batch(labeling, rng, cfg.rpn_batch, cfg.rpn_pos_frac).indices
    count = len(out.anchors)
    prop_terms = joint_loss(
        take_rows(reshape(out.scores, (count, 2)), picked),
        (labeling.labels[picked] == proposal.POSITIVE).astype(np.int64),
        take_rows(reshape(out.offsets, (count, 2)), picked),
        labeling.targets[picked],
        labeling.labels[picked] == proposal.POSITIVE,
        cfg.lam,
    )

    # Classification subnet
    if proposals is None:
        bounds, probs = out.candidates(num_frames)
        keep = classifier.select_proposal_indices(bounds, probs, cfg.train_top_n, net.nms_threshold)
        proposals = bounds[keep]
        if cfg.append_gt_proposals and len(buf.gt_bounds):
            proposals = np.concatenate([proposals, buf.gt_bounds])
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 2)
    cls_labeling = classifier.assign_proposal_labels(proposals, buf.gt_bounds, buf.gt_labels)

    pooled = pipeline.pool_streams(feats, proposals, RoiGrid.of(net.roi_grid))
    if cfg.ohem:
        chosen = classifier.ohem_select(
            classifier.readonly_view(params), pooled, cls_labeling, net.fusion, cfg.ohem_top_n, cfg.lam
        )
    else:
        chosen = classifier.sample_cls_batch(cls_labeling, rng, cfg.cls_batch, cfg.cls_pos_frac).indices
    selected = {stream: take_rows(feat, chosen) for stream, feat in pooled.items()}
    logits, offsets = classifier.classify(params, selected, net.fusion)
    labels = cls_labeling.labels[chosen]
    cls_terms = joint_loss(
        logits,
        labels,
        classifier.gather_offsets(offsets, labels),
        cls_labeling.targets[chosen],
        labels > 0,
        cfg.lam,
    )
    return StepLosses(prop_terms, cls_terms)


# ------------------------------------------------------------------ #
#  Optimiser
# ------------------------------------------------------------------ #

@dataclass
class OptimState:
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(
    params: dict[str, Tensor],
    grads: Mapping[str, Tensor],
    state: OptimState,
    lr: float,
    frozen: set[str] | frozenset[str] = frozenset(),
) -> None:
    """``v = mu * v + g + wd * w``; ``w = w - lr * v``.  Replaces tensors in ``params``.

    Every gradient is checked before any parameter moves.
    """
    for name in params:
        if name in frozen:
            continue
        g = grads[name].data
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(name, float(np.nanmax(np.abs(g))) if g.size else 0.0)

    for name, w in params.items():
        if name in frozen:
            continue
        g = grads[name].data
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(w.data)
        v = state.momentum * v + g + state.weight_decay * w.data
        if v.shape != w.shape:
            raise DimensionError(f"velocity {v.shape} does not match {name} {w.shape}", axis=name)
        state.velocity[name] = v
        params[name] = Tensor(w.data - lr * v, requires_grad=True, name=name)


# ------------------------------------------------------------------ #
#  Buffer prefetch
# ------------------------------------------------------------------ #

_DONE = object()


def _produce(dataset: Dataset, order: np.ndarray, cfg: TrainConfig, out: queue.Queue) -> None:
    try:
        for index in order:
            sample = dataset.sample(int(index), cfg.numpy_dtype)
            for buf in build_buffers(sample, cfg.buffer_len, cfg.two_way, cfg.flip):
                out.put(buf)
    except Exception as exc:  # re-raised in the consumer
        out.put(exc)
    finally:
        out.put(_DONE)


def prefetch_buffers(dataset: Dataset, order: np.ndarray, cfg: TrainConfig) -> Iterator[Buffer]:
    """Yield buffers while a producer thread prepares the next ones."""
    channel: queue.Queue = queue.Queue(maxsize=cfg.prefetch)
    worker = threading.Thread(target=_produce, args=(dataset, order, cfg, channel), daemon=True)
    worker.start()
    while True:
        item = channel.get()
        if item is _DONE:
            break
        if isinstance(item, Exception):
            raise item
        yield item
    worker.join()


# ------------------------------------------------------------------ #
#  Training loop
# ------------------------------------------------------------------ #

def checkpoint_meta(net: NetworkConfig, classes: list[str], epoch: int, iteration: int) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "network": net.model_dump(mode="json"),
        "classes": classes,
        "epoch": epoch,
        "iteration": iteration,
    }


def train(dataset: Dataset, cfg: TrainConfig) -> TrainSummary:
    """Train from scratch; writes the CSV log, checkpoints and ``summary.json``."""
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    net = cfg.network(len(dataset.classes))
    params = pipeline.init_params(net, rng, cfg.numpy_dtype)
    frozen = frozen_names(pipeline.streams_for(net), cfg.freeze_convs)
    state = OptimState(momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    logger.info(
        "Training %s model on %d videos for %d epochs (%d parameter tensors, %d frozen)",
        net.mode, len(dataset), cfg.epochs, len(params), len(frozen),
    )

    rows: list[dict[str, float]] = []
    iteration = 0
    started = time.perf_counter()
    log_path = out_dir / "train_log.csv"
    checkpoint = out_dir / "final.ckpt"

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        epoch_start = len(rows)
        order = rng.permutation(len(dataset))
        for buf in prefetch_buffers(dataset, order, cfg):
            iteration += 1
            with Tape() as tape:
                tape.watch(params)
                losses = compute_losses(params, net, cfg, buf, rng)
                total = losses.total
                grads = tape.backward(total, params)
            sgd_step(params, grads, state, lr, frozen)
            rows.append({"iteration": iteration, "lr": lr, **losses.row(), "total": total.item()})
            logger.debug("iter %d  %s  total=%.5f", iteration, buf.video_id, total.item())

        pd.DataFrame(rows, columns=LOG_COLUMNS).to_csv(log_path, index=False)
        epoch_rows = rows[epoch_start:]
        epoch_loss = float(np.mean([r["total"] for r in epoch_rows])) if epoch_rows else float("nan")
        logger.info("Epoch %d/%d done: lr=%g  mean total=%.5f", epoch + 1, cfg.epochs, lr, epoch_loss)
        if (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(
                out_dir / f"epoch_{epoch + 1:03d}.ckpt", params,
                checkpoint_meta(net, dataset.classes, epoch + 1, iteration),
            )

    save_checkpoint(checkpoint, params, checkpoint_meta(net, dataset.classes, cfg.epochs, iteration))
    summary = TrainSummary(
        output_dir=str(out_dir),
        epochs=cfg.epochs,
        iterations=iteration,
        final_total_loss=rows[-1]["total"] if rows else float("nan"),
        first_total_loss=rows[0]["total"] if rows else float("nan"),
        wall_seconds=time.perf_counter() - started,
        checkpoint=str(checkpoint),
        config=json.loads(cfg.model_dump_json()),
    )
    (out_dir / "summary.json").write_text(summary.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Training finished: %d iterations in %.1fs", iteration, summary.wall_seconds)
    return summary


def load_model(path: str | Path) -> tuple[dict[str, Tensor], NetworkConfig, list[str]]:
    """Parameters, architecture and class names from a checkpoint."""
    params, meta = load_checkpoint(path)
    try:
        net = NetworkConfig.model_validate(meta["network"])
    except (KeyError, ValueError) as exc:
        raise DataError(str(path), f"checkpoint has no usable network description: {exc}", field="network") from None
    return params, net, list(meta.get("classes", []))
