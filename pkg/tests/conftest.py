"""
Shared fixtures and the finite-difference gradient checker.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np
import pytest

from tempo.config import NetworkConfig, SynthConfig, TrainConfig
from tempo.dataset import Buffer, VideoSample, build_buffers, load_manifest, synth_generate
from tempo.models import Annotation
from tempo.tensor import Tape, Tensor, mul, no_grad, sum_all

EPS = 1e-6


def _project(out: Tensor, weights: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return out
    return sum_all(mul(out, Tensor(weights)))


def gradcheck(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    inputs: Mapping[str, Tensor],
    rng: np.random.Generator,
    per_tensor: int | None = None,
    eps: float = EPS,
) -> float:
    """Worst ``|analytic - numeric| / max(1, |analytic|)`` over the checked entries.

    Non-scalar outputs are reduced with a fixed random projection.
    ``per_tensor`` limits the check to that many random entries per input.
    """
    for t in inputs.values():
        t.requires_grad = True
    with no_grad():
        first = fn(inputs)
    weights = rng.standard_normal(first.shape) if first.size > 1 else None

    with Tape() as tape:
        tape.watch(inputs)
        loss = _project(fn(inputs), weights)
        grads = tape.backward(loss, inputs)

    def value() -> float:
        with no_grad():
            out = fn(inputs)
        return float(out.data.sum()) if weights is None else float((out.data * weights).sum())

    worst = 0.0
    for name, t in inputs.items():
        flat = t.data.reshape(-1)
        picks = np.arange(flat.size)
        if per_tensor is not None and flat.size > per_tensor:
            picks = rng.choice(flat.size, size=per_tensor, replace=False)
        analytic = grads[name].data.reshape(-1)
        for i in picks:
            saved = flat[i]
            flat[i] = saved + eps
            up = value()
            flat[i] = saved - eps
            down = value()
            flat[i] = saved
            numeric = (up - down) / (2 * eps)
            worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    return worst


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)


@pytest.fixture
def micro_net() -> NetworkConfig:
    """Smallest useful architecture: 16 frames of 16x16, width-2 stages."""
    return NetworkConfig(
        num_classes=2,
        widths=[2, 2, 2, 2, 2],
        anchor_scales=[1, 2],
        roi_grid=(1, 1, 1),
        hidden=4,
        buffer_len=16,
    )


@pytest.fixture
def micro_train_cfg(tmp_path) -> TrainConfig:
    return TrainConfig(
        output_dir=tmp_path / "run",
        widths=[2, 2, 2, 2, 2],
        anchor_scales=[1, 2],
        roi_grid=[1, 1, 1],
        hidden=4,
        buffer_len=16,
        rpn_batch=8,
        cls_batch=8,
        epochs=1,
    )


def make_sample(rng: np.random.Generator, frames: int = 16, size: int = 16,
                annotations: list[Annotation] | None = None, fps: float = 8.0) -> VideoSample:
    return VideoSample(
        id="clip",
        fps=fps,
        rgb=Tensor(rng.standard_normal((3, frames, size, size))),
        flow=Tensor(rng.standard_normal((2, frames - 1, size, size))),
        annotations=annotations if annotations is not None else [
            Annotation(label=1, start_sec=0.25, end_sec=1.25),
        ],
    )


@pytest.fixture
def micro_buffer(rng) -> Buffer:
    (buf,) = build_buffers(make_sample(rng), 16)
    return buf


@pytest.fixture
def tiny_synth_cfg() -> SynthConfig:
    return SynthConfig(
        num_videos=3,
        num_test_videos=2,
        num_classes=2,
        num_frames=32,
        frame_size=16,
        fps=8,
        min_duration=8,
        max_duration=16,
        min_activities=1,
        max_activities=2,
        block_size=4,
        seed=3,
    )


@pytest.fixture
def tiny_corpus(tmp_path, tiny_synth_cfg):
    """Synthesised corpus on disk; yields the data directory."""
    out = tmp_path / "data"
    synth_generate(tiny_synth_cfg, out)
    return out


@pytest.fixture
def tiny_dataset(tiny_corpus):
    return load_manifest(tiny_corpus / "train.json")
