import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ovdist.geometry import (
    Box,
    Detection,
    InvalidCropError,
    crop_resize_long_side_pad,
    expand_box,
    iou,
    iou_matrix,
    nms,
)
from reference import bilinear_ref, iou_ref, nms_ref


def boxes_strategy(max_coord=100.0):
    coord = st.floats(0.0, max_coord, allow_nan=False)
    return st.builds(
        lambda x1, y1, w, h: Box(x1, y1, x1 + w, y1 + h),
        coord,
        coord,
        st.floats(0.0, 50.0),
        st.floats(0.0, 50.0),
    )


class TestBox:
    def test_rejects_unordered_corners(self):
        with pytest.raises(ValueError):
            Box(3, 0, 1, 2)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Box(0, 0, float("nan"), 1)

    def test_detection_score_range(self):
        with pytest.raises(ValueError):
            Detection(Box(0, 0, 1, 1), 0, 1.5)


class TestIou:
    def test_identity(self):
        b = Box(2, 3, 10, 12)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 1, 1), Box(5, 5, 6, 6)) == 0.0

    def test_hand_computed_overlap(self):
        # inter = 1, union = 4 + 4 - 1 = 7
        assert iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) == pytest.approx(1 / 7)

    def test_degenerate_is_zero(self):
        line = Box(0, 0, 0, 5)
        assert iou(line, line) == 0.0
        assert iou(line, Box(0, 0, 2, 2)) == 0.0

    @given(boxes_strategy(), boxes_strategy())
    @settings(max_examples=100, deadline=None)
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0 + 1e-12

    def test_matrix_matches_scalar(self, rng):
        a = rng.uniform(0, 50, (12, 2))
        b = rng.uniform(0, 50, (9, 2))
        aa = np.concatenate([a, a + rng.uniform(1, 30, a.shape)], axis=1)
        bb = np.concatenate([b, b + rng.uniform(1, 30, b.shape)], axis=1)
        mat = iou_matrix(aa, bb)
        for i in range(12):
            for j in range(9):
                assert mat[i, j] == pytest.approx(
                    iou_ref(Box(*aa[i]), Box(*bb[j])), abs=1e-12
                )


class TestExpandBox:
    def test_center_scale(self):
        assert expand_box(Box(10, 10, 30, 30), 1.5, (100, 100)) == Box(5, 5, 35, 35)

    def test_identity_factor(self):
        b = Box(3, 4, 9, 11)
        assert expand_box(b, 1.0, (100, 100)) == b

    def test_clips_to_bounds(self):
        assert expand_box(Box(0, 0, 40, 40), 1.5, (50, 50)) == Box(0, 0, 50, 50)

    def test_rejects_shrinking(self):
        with pytest.raises(ValueError):
            expand_box(Box(0, 0, 1, 1), 0.5, (10, 10))

    @given(
        boxes_strategy(20.0),
        st.floats(1.0, 1.6),
        st.floats(1.0, 1.6),
    )
    @settings(max_examples=60, deadline=None)
    def test_composition_without_clipping(self, b, f, g):
        bounds = (1e6, 1e6)
        once = expand_box(expand_box(b, f, bounds), g, bounds)
        direct = expand_box(b, f * g, bounds)
        for u, v in zip(once.as_array(), direct.as_array()):
            assert u == pytest.approx(v, abs=1e-6)


class TestCropResize:
    def test_wide_crop_pads_bottom(self):
        img = np.full((50, 100, 3), 37, dtype=np.uint8)
        out = crop_resize_long_side_pad(img, Box(0, 0, 100, 50), 224)
        assert out.shape == (224, 224, 3)
        assert np.all(out[:112] == 37.0)
        assert np.all(out[112:] == 0.0)

    def test_square_crop_no_padding(self):
        img = np.full((64, 64, 3), 11, dtype=np.uint8)
        out = crop_resize_long_side_pad(img, Box(0, 0, 64, 64), 224)
        assert np.all(out == 11.0)

    def test_all_zero_image(self):
        img = np.zeros((32, 48, 3), dtype=np.uint8)
        out = crop_resize_long_side_pad(img, Box(0, 0, 48, 32), 224)
        assert np.all(out == 0.0)

    def test_empty_intersection_errors(self):
        img = np.zeros((32, 32, 3), dtype=np.uint8)
        with pytest.raises(InvalidCropError):
            crop_resize_long_side_pad(img, Box(40, 40, 50, 50), 224)

    def test_content_matches_bilinear_oracle(self, rng):
        img = rng.integers(0, 256, (21, 13, 3)).astype(np.uint8)
        out = crop_resize_long_side_pad(img, Box(2, 3, 11, 17), 32)
        crop = img[3:17, 2:11].astype(np.float64)
        new_h, new_w = 32, round(9 * 32 / 14)
        expected = bilinear_ref(crop, new_h, new_w)
        np.testing.assert_allclose(out[:new_h, :new_w], expected, atol=1e-3)
        assert np.all(out[:, new_w:] == 0.0)


def _random_detections(rng, n, n_categories=3, max_coord=40.0):
    dets = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, max_coord, 2)
        w, h = rng.uniform(1, 15, 2)
        dets.append(
            Detection(
                Box(x1, y1, x1 + w, y1 + h),
                int(rng.integers(0, n_categories)),
                float(rng.uniform(0, 1)),
            )
        )
    return dets


class TestNms:
    def test_single_detection(self):
        d = Detection(Box(0, 0, 5, 5), 1, 0.7)
        assert nms([d], 0.4) == [d]

    def test_duplicate_boxes_keep_highest(self):
        hi = Detection(Box(0, 0, 5, 5), 1, 0.9)
        lo = Detection(Box(0, 0, 5, 5), 1, 0.8)
        assert nms([lo, hi], 0.4) == [hi]

    def test_different_categories_not_suppressed(self):
        a = Detection(Box(0, 0, 5, 5), 1, 0.9)
        b = Detection(Box(0, 0, 5, 5), 2, 0.8)
        assert nms([a, b], 0.4) == [a, b]

    def test_empty(self):
        assert nms([], 0.4) == []

    def test_matches_oracle_on_random_instances(self, rng):
        for _ in range(30):
            dets = _random_detections(rng, 20)
            assert nms(dets, 0.4) == nms_ref(dets, 0.4)

    def test_output_subset_and_no_overlap(self, rng):
        dets = _random_detections(rng, 50)
        kept = nms(dets, 0.3)
        assert all(k in dets for k in kept)
        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                if a.category == b.category:
                    assert iou(a.box, b.box) <= 0.3 + 1e-12
