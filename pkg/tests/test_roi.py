"""3D RoI max pooling."""

import numpy as np
import pytest

from tempo.errors import DomainError
from tempo.geometry import Segment
from tempo.roi import RoiGrid, bin_ranges, feature_span, roi_pool_3d, roi_pool_batch
from tempo.tensor import Tape, Tensor, parameter, sum_all
from tests.conftest import gradcheck
from tests.test_geometry import random_bounds


class TestBins:
    def test_even_split(self):
        assert bin_ranges(0, 8, 4) == [(0, 2), (2, 4), (4, 6), (6, 8)]

    def test_more_bins_than_cells(self):
        bins = bin_ranges(0, 2, 4)
        assert all(end - start == 1 for start, end in bins)
        assert {start for start, _ in bins} <= {0, 1}

    def test_round_half_up(self):
        assert bin_ranges(0, 3, 2) == [(0, 2), (2, 3)]

    def test_feature_span_rounds_outward(self):
        assert feature_span((3.0, 17.0), 12) == (0, 3)
        assert feature_span((8.0, 16.0), 12) == (1, 2)
        assert feature_span((90.0, 200.0), 12) == (11, 12)

    def test_outside_map(self):
        with pytest.raises(DomainError):
            feature_span((100.0, 120.0), 12)


class TestPooling:
    def test_full_size_shape(self, rng):
        feat = Tensor(rng.standard_normal((512, 96, 7, 7)).astype(np.float32))
        out = roi_pool_3d(feat, Segment.from_bounds(0, 64), RoiGrid(1, 4, 4))
        assert out.shape == (512, 1, 4, 4)

    def test_constant_feature(self, rng):
        feat = Tensor(np.full((3, 12, 2, 2), 1.5))
        for _ in range(20):
            s = rng.uniform(0, 90)
            out = roi_pool_3d(feat, Segment.from_bounds(s, s + rng.uniform(1, 96 - s)), RoiGrid(2, 2, 2))
            np.testing.assert_array_equal(out.data, 1.5)

    def test_shape_property(self, rng):
        feat = Tensor(rng.standard_normal((2, 12, 4, 4)))
        grid = RoiGrid(3, 2, 2)
        for _ in range(50):
            s = rng.uniform(0, 95)
            out = roi_pool_3d(feat, Segment.from_bounds(s, rng.uniform(s + 0.5, 96)), grid)
            assert out.shape == (2, 3, 2, 2)

    def test_spike(self):
        data = np.zeros((1, 6, 4, 4))
        data[0, 2, 1, 3] = 5.0
        feat = parameter(data, "feat")
        grid = RoiGrid(3, 2, 2)
        with Tape() as tape:
            out = roi_pool_3d(feat, Segment.from_bounds(0, 48), grid)
            grads = tape.backward(sum_all(out), {"feat": feat})
        # Temporal bins are [0,2), [2,4), [4,6): the spike lands in bin 1, top-right cell.
        expected = np.zeros((1, 3, 2, 2))
        expected[0, 1, 0, 1] = 5.0
        np.testing.assert_array_equal(out.data, expected)
        assert grads["feat"].data[0, 2, 1, 3] == 1.0

    def test_spike_counted_per_bin(self):
        data = np.zeros((1, 2, 2, 2))
        data[0, 0, 0, 0] = 1.0
        feat = parameter(data, "feat")
        # Three temporal bins over one cell all read that cell.
        with Tape() as tape:
            out = roi_pool_3d(feat, Segment.from_bounds(0, 8), RoiGrid(3, 1, 1))
            grads = tape.backward(sum_all(out), {"feat": feat})
        np.testing.assert_array_equal(out.data.ravel(), [1.0, 1.0, 1.0])
        assert grads["feat"].data[0, 0, 0, 0] == 3.0

    def test_monotone_in_features(self, rng):
        grid = RoiGrid(2, 2, 2)
        bounds = random_bounds(rng, 10, horizon=96)
        for _ in range(20):
            feat = rng.standard_normal((2, 12, 4, 4))
            raised = feat + np.abs(rng.standard_normal(feat.shape)) * (rng.random(feat.shape) < 0.3)
            low = roi_pool_batch(Tensor(feat), bounds, grid).data
            high = roi_pool_batch(Tensor(raised), bounds, grid).data
            assert (high >= low).all()

    def test_wider_proposal_never_pools_less(self, rng):
        grid = RoiGrid(1, 2, 2)
        for _ in range(50):
            feat = Tensor(rng.standard_normal((2, 12, 4, 4)))
            s = rng.uniform(8, 60)
            inner = Segment.from_bounds(s, s + rng.uniform(1, 30))
            outer = Segment.from_bounds(s - rng.uniform(0, 8), inner.end + rng.uniform(0, 6))
            assert (roi_pool_3d(feat, outer, grid).data >= roi_pool_3d(feat, inner, grid).data).all()

    def test_batch_matches_single(self, rng):
        feat = Tensor(rng.standard_normal((2, 12, 4, 4)))
        bounds = np.array([[3.0, 40.0], [50.0, 96.0]])
        batch = roi_pool_batch(feat, bounds, RoiGrid(2, 2, 2))
        for n, row in enumerate(bounds):
            single = roi_pool_3d(feat, Segment.from_bounds(*row), RoiGrid(2, 2, 2))
            np.testing.assert_array_equal(batch.data[n], single.data)

    def test_gradient(self, rng):
        for _ in range(20):
            s = rng.uniform(0, 60)
            bounds = np.array([[s, s + rng.uniform(4, 36)], [10.0, 30.0]])
            inputs = {"feat": Tensor(rng.standard_normal((2, 12, 4, 4)))}
            err = gradcheck(lambda p: roi_pool_batch(p["feat"], bounds, RoiGrid(2, 2, 2)), inputs, rng)
            assert err < 1e-6
