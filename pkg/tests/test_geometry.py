"""Anchors, tIoU, offset transforms, clipping and NMS."""

import numpy as np
import pytest

from tempo.errors import DomainError
from tempo.geometry import (
    ANCHOR_PRESETS,
    AnchorConfig,
    Offset,
    ScoredSegment,
    Segment,
    anchor_array,
    clip,
    decode,
    decode_array,
    encode,
    encode_array,
    generate_anchors,
    nms,
    nms_indices,
    tiou,
    tiou_matrix,
)


def brute_nms(bounds, scores, threshold):
    remaining = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        survivors = []
        for i in remaining:
            s = max(bounds[best][0], bounds[i][0])
            e = min(bounds[best][1], bounds[i][1])
            inter = max(0.0, e - s)
            union = (bounds[best][1] - bounds[best][0]) + (bounds[i][1] - bounds[i][0]) - inter
            if inter / union <= threshold:
                survivors.append(i)
        remaining = survivors
    return kept


def random_bounds(rng, n, horizon=100.0):
    starts = rng.uniform(0, horizon, size=n)
    return np.stack([starts, starts + rng.uniform(1, 30, size=n)], axis=1)


class TestAnchors:
    def test_count(self):
        assert len(anchor_array(AnchorConfig.preset("thumos14"), 768)) == 960

    def test_durations(self):
        durations = AnchorConfig.preset("thumos14", fps=25).durations()
        assert durations[0] == pytest.approx(0.64)
        assert durations[-1] == pytest.approx(5.12)

    @pytest.mark.parametrize(
        "preset, fps, shortest, longest",
        [("activitynet", 3, 8 / 3, 512 / 3), ("charades", 5, 1.6, 76.8)],
    )
    def test_other_presets(self, preset, fps, shortest, longest):
        durations = AnchorConfig.preset(preset, fps=fps).durations()
        assert durations[0] == pytest.approx(shortest)
        assert durations[-1] == pytest.approx(longest)

    def test_single_anchor(self):
        (seg,) = generate_anchors(AnchorConfig(scales=[1]), 8)
        assert seg.center == 4.0 and seg.length == 8.0

    def test_location_major_order(self):
        anchors = anchor_array(AnchorConfig(scales=ANCHOR_PRESETS["desk"]), 16)
        np.testing.assert_allclose(anchors[:4].mean(axis=1), 4.0)
        np.testing.assert_allclose(anchors[4:].mean(axis=1), 12.0)

    def test_frames_not_divisible(self):
        with pytest.raises(DomainError):
            anchor_array(AnchorConfig(scales=[1]), 12)

    def test_scales_must_increase(self):
        with pytest.raises(ValueError):
            AnchorConfig(scales=[2, 2])

    def test_unknown_preset(self):
        with pytest.raises(DomainError):
            AnchorConfig.preset("kinetics")


class TestTiou:
    def test_identical(self):
        a = Segment.from_bounds(3, 9)
        assert tiou(a, a) == 1.0

    def test_disjoint(self):
        assert tiou(Segment.from_bounds(0, 1), Segment.from_bounds(2, 3)) == 0.0

    def test_partial(self):
        assert tiou(Segment.from_bounds(0, 10), Segment.from_bounds(5, 15)) == pytest.approx(1 / 3)

    def test_symmetric_and_bounded(self, rng):
        a, b = random_bounds(rng, 30), random_bounds(rng, 20)
        m = tiou_matrix(a, b)
        np.testing.assert_array_equal(m, tiou_matrix(b, a).T)
        assert (m >= 0).all() and (m <= 1).all()


class TestTransform:
    def test_identity(self):
        seg = Segment(center=10, length=4)
        assert encode(seg, seg) == Offset(dc=0.0, dl=0.0)

    def test_known_values(self):
        off = encode(Segment(center=10, length=4), Segment(center=12, length=8))
        assert off.dc == pytest.approx(0.5)
        assert off.dl == pytest.approx(np.log(2))
        back = decode(Segment(center=10, length=4), Offset(dc=0.5, dl=float(np.log(2))))
        assert back.center == pytest.approx(12) and back.length == pytest.approx(8)

    def test_zero_offset_keeps_anchor(self):
        anchor = Segment(center=7, length=3)
        assert decode(anchor, Offset(dc=0, dl=0)) == anchor

    def test_round_trip(self, rng):
        n = 10_000
        centres = rng.uniform(-100, 100, n)
        lengths = np.exp(rng.uniform(np.log(1e-3), np.log(1e6), n))
        anchors = np.stack([centres - lengths / 2, centres + lengths / 2], axis=1)
        gt_centres = centres + rng.uniform(-5, 5, n) * lengths
        gt_lengths = lengths * np.exp(rng.uniform(-9, 9, n))
        gts = np.stack([gt_centres - gt_lengths / 2, gt_centres + gt_lengths / 2], axis=1)
        back = decode_array(anchors, encode_array(anchors, gts))
        err = np.abs(back - gts) / np.maximum(1.0, np.abs(gts))
        assert err.max() < 1e-12

    def test_round_trip_segments(self, rng):
        for _ in range(1000):
            anchor = Segment(center=rng.uniform(0, 100), length=rng.uniform(0.5, 50))
            gt = Segment(center=rng.uniform(0, 100), length=rng.uniform(0.5, 50))
            back = decode(anchor, encode(anchor, gt))
            assert back.center == pytest.approx(gt.center, rel=1e-12, abs=1e-12)
            assert back.length == pytest.approx(gt.length, rel=1e-12)

    def test_log_length_clamped(self):
        seg = decode(Segment(center=0, length=1), Offset(dc=0, dl=50.0))
        assert seg.length == pytest.approx(np.exp(10.0))

    def test_encode_rejects_degenerate(self):
        with pytest.raises(DomainError):
            encode_array(np.array([[1.0, 1.0]]), np.array([[0.0, 2.0]]))


class TestClip:
    def test_examples(self):
        assert clip(Segment.from_bounds(-5, 5), 768).bounds() == (0.0, 5.0)
        assert clip(Segment.from_bounds(700, 800), 768).bounds() == (700.0, 768.0)
        assert clip(Segment.from_bounds(-3, -1), 768) is None


class TestNms:
    def test_single(self):
        item = ScoredSegment(segment=Segment.from_bounds(0, 1), score=0.3)
        assert nms([item], 0.7) == [item]

    def test_duplicates(self):
        a = ScoredSegment(segment=Segment.from_bounds(0, 10), score=0.9)
        b = ScoredSegment(segment=Segment.from_bounds(0, 10), score=0.8)
        assert nms([b, a], 0.5) == [a]

    def test_empty(self):
        assert nms([], 0.5) == []
        assert nms_indices(np.zeros((0, 2)), np.zeros(0), 0.5).size == 0

    def test_tie_prefers_lower_index(self):
        bounds = np.array([[0.0, 10.0], [0.0, 10.0]])
        assert nms_indices(bounds, np.array([0.5, 0.5]), 0.5).tolist() == [0]

    def test_matches_brute_force(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 50))
            bounds = random_bounds(rng, n)
            scores = rng.integers(0, 10, size=n) / 10.0
            threshold = float(rng.uniform(0, 1))
            assert nms_indices(bounds, scores, threshold).tolist() == brute_nms(bounds, scores, threshold)

    def test_antichain_and_idempotent(self, rng):
        bounds = random_bounds(rng, 50)
        scores = rng.random(50)
        kept = nms_indices(bounds, scores, 0.7)
        overlap = tiou_matrix(bounds[kept], bounds[kept])
        np.fill_diagonal(overlap, 0.0)
        assert (overlap <= 0.7).all()
        again = nms_indices(bounds[kept], scores[kept], 0.7)
        assert kept[again].tolist() == kept.tolist()

    def test_bad_threshold(self):
        with pytest.raises(DomainError):
            nms_indices(np.zeros((1, 2)), np.zeros(1), 1.5)
