"""Synthetic corpus generation, manifests and buffer construction."""

import numpy as np
import pytest

from tempo.config import SynthConfig
from tempo.dataset import (
    VideoSample,
    build_buffers,
    load_detections,
    load_manifest,
    motion_signatures,
    render_video,
    save_detections,
    synth_generate,
)
from tempo.errors import DataError
from tempo.models import Annotation, Detection
from tempo.tensor import Tensor
from tests.conftest import make_sample


class TestSynthesis:
    def test_signatures_distinct(self):
        for n in (1, 3, 8, 20):
            sigs = motion_signatures(n)
            assert len(sigs) == n
            assert len(set(sigs)) == n
            assert (0, 0) not in sigs

    def test_no_activities_gives_idle_flow(self, rng):
        cfg = SynthConfig(num_frames=24, frame_size=16, min_duration=8, max_duration=8,
                          min_activities=0, max_activities=0, block_size=4)
        rgb, flow, intervals = render_video(cfg, rng)
        assert intervals == []
        assert rgb.shape == (3, 24, 16, 16) and flow.shape == (2, 23, 16, 16)
        assert (flow == 0).all()

    def test_flow_matches_displacement(self, rng):
        cfg = SynthConfig(num_classes=2, num_frames=32, frame_size=16, min_duration=8, max_duration=8,
                          min_activities=1, max_activities=1, block_size=4)
        for _ in range(10):
            rgb, flow, [(start, end, label)] = render_video(cfg, rng)
            dx, dy = motion_signatures(2)[label]
            moving = flow[:, start:end - 1]
            support = (moving != 0).any(axis=0)
            assert support.sum() > 0
            if label == 1:
                assert (dx, dy) == (1, 0)
                assert (moving[0][support] == 1).all()
            assert (moving[0][support] == dx).all() and (moving[1][support] == dy).all()

    def test_block_follows_signature(self, rng):
        cfg = SynthConfig(num_classes=2, num_frames=16, frame_size=16, min_duration=8, max_duration=8,
                          min_activities=1, max_activities=1, block_size=4, noise=0.0, color_cue=False)
        rgb, _, [(start, _, label)] = render_video(cfg, rng)
        dx, dy = motion_signatures(2)[label]
        first = rgb[0, start] > 0
        second = rgb[0, start + 1] > 0
        np.testing.assert_array_equal(np.roll(first, (dy, dx), axis=(0, 1)), second)

    def test_flow_stronger_inside_activities(self, tiny_dataset):
        for sample in tiny_dataset.samples():
            bounds, _ = sample.gt_frames()
            inside = np.zeros(sample.num_frames - 1, dtype=bool)
            for s, e in bounds.astype(int):
                inside[s:e - 1] = True
            magnitude = np.abs(sample.flow.data).sum(axis=(0, 2, 3))
            assert magnitude[inside].mean() > magnitude[~inside].mean() if (~inside).any() else True

    def test_deterministic(self, tmp_path, tiny_synth_cfg):
        synth_generate(tiny_synth_cfg, tmp_path / "a")
        synth_generate(tiny_synth_cfg, tmp_path / "b")
        for path in sorted((tmp_path / "a" / "tensors").iterdir()):
            assert path.read_bytes() == (tmp_path / "b" / "tensors" / path.name).read_bytes()
        assert (tmp_path / "a" / "train.json").read_text() == (tmp_path / "b" / "train.json").read_text()

    def test_manifests(self, tiny_corpus, tiny_synth_cfg):
        train = load_manifest(tiny_corpus / "train.json")
        test = load_manifest(tiny_corpus / "test.json")
        assert len(train) == tiny_synth_cfg.num_videos and len(test) == tiny_synth_cfg.num_test_videos
        assert train.classes == ["class_0", "class_1"]
        sample = train.sample(0)
        assert sample.rgb.shape == (3, 32, 16, 16)
        assert sample.flow.shape == (2, 31, 16, 16)
        for video in train.manifest.videos:
            assert 1 <= len(video.annotations) <= 2
            ends = [a.end_sec for a in video.annotations]
            starts = [a.start_sec for a in video.annotations]
            assert all(e <= s for e, s in zip(ends, starts[1:]))

    def test_infeasible_packing_rejected(self):
        with pytest.raises(ValueError, match="infeasible"):
            SynthConfig(num_frames=32, max_duration=20, min_duration=8, max_activities=2)

    def test_overlap_mode_allows_packing(self):
        SynthConfig(num_frames=32, max_duration=20, min_duration=8, max_activities=3, overlap=True)

    def test_missing_tensor(self, tiny_corpus):
        (tiny_corpus / "tensors" / "train_0001.flow.tnsr").unlink()
        with pytest.raises(DataError, match="train_0001.flow.tnsr"):
            load_manifest(tiny_corpus / "train.json")

    def test_detections_round_trip(self, tmp_path):
        dets = [Detection(video_id="a", label=1, start_sec=0.5, end_sec=2.0, score=0.4)]
        save_detections(tmp_path / "d.jsonl", dets)
        assert load_detections(tmp_path / "d.jsonl") == dets


class TestBuffers:
    def test_exact_length(self, rng):
        sample = make_sample(rng, frames=16)
        (buf,) = build_buffers(sample, 16)
        np.testing.assert_array_equal(buf.rgb.data, sample.rgb.data)
        np.testing.assert_array_equal(buf.gt_bounds, [[2.0, 10.0]])
        assert buf.flow.shape == (2, 15, 16, 16)
        assert buf.num_valid == 16 and buf.start_frame == 0

    def test_short_video_repeats_last_frame(self, rng):
        sample = make_sample(rng, frames=40)
        (buf,) = build_buffers(sample, 96)
        assert buf.length == 96 and buf.num_valid == 40
        for t in range(40, 96):
            np.testing.assert_array_equal(buf.rgb.data[:, t], sample.rgb.data[:, 39])
        assert (buf.flow.data[:, 39:] == 0).all()

    def test_long_video_splits(self, rng):
        sample = make_sample(rng, frames=40, annotations=[Annotation(label=0, start_sec=1.0, end_sec=3.0)])
        bufs = build_buffers(sample, 16)
        assert [b.start_frame for b in bufs] == [0, 16, 32]
        assert [b.num_valid for b in bufs] == [16, 16, 8]
        # [8, 24) keeps exactly half in each of the first two buffers.
        np.testing.assert_array_equal(bufs[0].gt_bounds, [[8.0, 16.0]])
        np.testing.assert_array_equal(bufs[1].gt_bounds, [[0.0, 8.0]])
        assert len(bufs[2].gt_bounds) == 0

    def test_mostly_outside_segment_dropped(self, rng):
        sample = make_sample(rng, frames=32, annotations=[Annotation(label=0, start_sec=1.5, end_sec=3.0)])
        first, second = build_buffers(sample, 16)
        assert len(first.gt_bounds) == 0
        np.testing.assert_array_equal(second.gt_bounds, [[0.0, 8.0]])

    def test_two_way(self, rng):
        sample = make_sample(rng, frames=96, annotations=[Annotation(label=0, start_sec=1.25, end_sec=2.5)])
        bufs = build_buffers(sample, 96, two_way=True)
        assert len(bufs) == 2
        forward, backward = bufs
        assert backward.reversed and not forward.reversed
        np.testing.assert_array_equal(backward.gt_bounds, [[76.0, 86.0]])
        np.testing.assert_array_equal(backward.rgb.data, sample.rgb.data[:, ::-1])

    @pytest.mark.parametrize("reverse", [False, True])
    def test_flow_points_from_block_to_block(self, rng, reverse):
        cfg = SynthConfig(num_frames=32, frame_size=16, min_duration=8, max_duration=16,
                          min_activities=2, max_activities=2, block_size=4, noise=0.5)
        rgb, flow, _ = render_video(cfg, rng)
        sample = VideoSample(id="v", fps=8.0, rgb=Tensor(rgb), flow=Tensor(flow))
        buf = build_buffers(sample, 32, two_way=True)[1 if reverse else 0]
        assert buf.reversed == reverse
        frames, field = buf.rgb.data, buf.flow.data
        moving = 0
        for t in range(field.shape[1]):
            ys, xs = np.nonzero(np.any(field[:, t] != 0, axis=0))
            moving += len(ys)
            ty = (ys + field[1, t, ys, xs].astype(np.int64)) % 16
            tx = (xs + field[0, t, ys, xs].astype(np.int64)) % 16
            np.testing.assert_array_equal(frames[:, t, ys, xs], frames[:, t + 1, ty, tx])
        assert moving > 0

    def test_flip(self, rng):
        sample = make_sample(rng, frames=16)
        plain, mirrored = build_buffers(sample, 16, flip=True)
        assert mirrored.flipped
        np.testing.assert_array_equal(mirrored.rgb.data, plain.rgb.data[..., ::-1])
        np.testing.assert_array_equal(mirrored.flow.data[0], -plain.flow.data[0][..., ::-1])
        np.testing.assert_array_equal(mirrored.flow.data[1], plain.flow.data[1][..., ::-1])
        np.testing.assert_array_equal(mirrored.gt_bounds, plain.gt_bounds)

    def test_two_way_and_flip(self, rng):
        assert len(build_buffers(make_sample(rng, frames=16), 16, two_way=True, flip=True)) == 4

    def test_buffer_length_must_divide(self, rng):
        with pytest.raises(DataError, match="multiple of 8"):
            build_buffers(make_sample(rng), 12)

    def test_duration_preserved(self, rng):
        sample = make_sample(rng, frames=48, annotations=[Annotation(label=0, start_sec=0.5, end_sec=2.5)])
        (buf,) = build_buffers(sample, 48)
        total = (buf.gt_bounds[:, 1] - buf.gt_bounds[:, 0]).sum()
        assert abs(total - 16.0) <= 1.0
