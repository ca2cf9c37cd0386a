"""Geometry and correspondence contracts."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from detfuse.core import BoundingBox, Detection, correspondences, coverage, iou
from detfuse.errors import DataError

from conftest import box, det, iou_oracle, random_box


class TestBoundingBox:
    def test_rejects_zero_area(self):
        with pytest.raises(DataError):
            BoundingBox(0, 0, 0, 10)

    def test_rejects_inverted(self):
        with pytest.raises(DataError):
            BoundingBox(5, 0, 1, 10)

    def test_rejects_non_finite(self):
        with pytest.raises(DataError):
            BoundingBox(0, 0, math.inf, 10)
        with pytest.raises(DataError):
            BoundingBox(0, math.nan, 10, 10)

    def test_area(self):
        assert box(0, 0, 10, 5).area == 50.0


class TestDetectionInvariants:
    def test_calibrated_score_open_interval(self):
        with pytest.raises(DataError):
            det(cal=0.0)
        with pytest.raises(DataError):
            det(cal=1.0)
        assert det(cal=0.5).calibrated_score == 0.5


class TestIou:
    def test_identical(self):
        assert iou(box(0, 0, 10, 10), box(0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert iou(box(0, 0, 10, 10), box(20, 20, 30, 30)) == 0.0

    def test_half_shift(self):
        # intersection 50, union 150
        assert iou(box(0, 0, 10, 10), box(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)


class TestCoverage:
    def test_containment(self):
        assert coverage(box(2, 2, 4, 4), box(0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert coverage(box(0, 0, 10, 10), box(20, 20, 30, 30)) == 0.0

    def test_half(self):
        assert coverage(box(0, 0, 10, 10), box(5, 0, 15, 10)) == 0.5


finite_boxes = st.builds(
    lambda x0, y0, w, h: BoundingBox(x0, y0, x0 + w, y0 + h),
    st.floats(-1e3, 1e3),
    st.floats(-1e3, 1e3),
    st.floats(1e-3, 1e3),
    st.floats(1e-3, 1e3),
)


class TestGeometryProperties:
    @settings(max_examples=200, deadline=None)
    @given(finite_boxes, finite_boxes)
    def test_iou_symmetric(self, a, b):
        assert iou(a, b) == iou(b, a)

    @settings(max_examples=100, deadline=None)
    @given(finite_boxes)
    def test_self_iou_is_one(self, a):
        assert iou(a, a) == 1.0

    @settings(max_examples=200, deadline=None)
    @given(finite_boxes, finite_boxes)
    def test_coverage_bounds_iou(self, a, b):
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert coverage(a, b) >= v - 1e-12

    def test_iou_matches_independent_oracle(self, rng):
        for _ in range(2000):
            a, b = random_box(rng), random_box(rng)
            assert iou(a, b) == pytest.approx(iou_oracle(a, b), abs=1e-12)


def brute_force_correspondence(target, dets, n_detectors):
    """Oracle: plain double loop with explicit tie-breaking."""
    gammas = [0.0] * n_detectors
    partners = [None] * n_detectors
    for j in range(n_detectors):
        best = None
        for idx, d in enumerate(dets):
            if d.detector_id != j:
                continue
            g = iou(target.box, d.box)
            if g == 0.0:
                continue
            key = (-g, -d.raw_score, idx)
            if best is None or key < best[0]:
                best = (key, g, idx)
        if best is not None:
            gammas[j] = best[1]
            partners[j] = best[2]
    return tuple(gammas), tuple(partners)


class TestCorrespondences:
    def test_only_self(self):
        d = det()
        c = correspondences(d, [d], 3)
        assert c.gammas == (1.0, 0.0, 0.0)
        assert c.partners == (0, None, None)

    def test_argmax_over_detector(self):
        target = det(b=box(0, 0, 10, 10))
        strong = det(detector=1, b=box(0, 0, 10, 15))  # IoU 2/3
        weak = det(detector=1, b=box(0, 0, 10, 25))    # IoU 0.4
        c = correspondences(target, [target, strong, weak], 2)
        assert c.partners[1] == 1
        assert c.gammas[1] == pytest.approx(2 / 3)

    def test_disjoint_foreign_detections(self):
        target = det(b=box(0, 0, 10, 10))
        others = [det(detector=j, b=box(50 * j + 100, 0, 50 * j + 110, 10)) for j in (1, 2)]
        c = correspondences(target, [target] + others, 3)
        assert c.gammas[1] == 0.0 and c.gammas[2] == 0.0
        assert c.partners[1] is None and c.partners[2] is None

    def test_gamma_zero_iff_partner_absent(self, rng):
        for _ in range(200):
            dets = [det(detector=int(rng.integers(3)), b=random_box(rng, hi=40)) for _ in range(6)]
            c = correspondences(dets[0], dets, 3)
            for g, p in zip(c.gammas, c.partners):
                assert (g == 0.0) == (p is None)

    def test_tie_broken_by_raw_score_then_index(self):
        target = det(b=box(0, 0, 10, 10))
        a = det(detector=1, b=box(0, 0, 10, 10), raw=0.3)
        b_ = det(detector=1, b=box(0, 0, 10, 10), raw=0.9)
        c = correspondences(target, [target, a, b_], 2)
        assert c.partners[1] == 2  # higher raw score wins the IoU tie
        same = det(detector=1, b=box(0, 0, 10, 10), raw=0.9)
        c = correspondences(target, [target, b_, same], 2)
        assert c.partners[1] == 1  # equal score: lower index wins

    def test_matches_brute_force_on_random_instances(self, rng):
        for _ in range(500):
            n_det = int(rng.integers(1, 4))
            dets = [
                det(
                    detector=int(rng.integers(n_det)),
                    b=random_box(rng, hi=30),
                    raw=float(rng.normal()),
                )
                for _ in range(int(rng.integers(1, 10)))
            ]
            target = dets[int(rng.integers(len(dets)))]
            c = correspondences(target, dets, n_det)
            gammas, partners = brute_force_correspondence(target, dets, n_det)
            assert c.partners == partners
            assert np.allclose(c.gammas, gammas)
