import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corpnlab.geometry import (AnchorLabel, Box, as_boxes, generate_anchors, iou, label_anchors, nms,
                               pairwise_iou)
from oracles import brute_nms, raster_iou

int_box = st.tuples(st.integers(0, 12), st.integers(0, 12), st.integers(0, 12), st.integers(0, 12)).map(
    lambda t: (min(t[0], t[2]), min(t[1], t[3]), max(t[0], t[2]), max(t[1], t[3])))


def test_box_validation():
    with pytest.raises(ValueError):
        Box(2, 0, 1, 1)
    b = Box(0, 0, 2, 3)
    assert b.area == 6
    assert Box.from_array(b.as_array()) == b


def test_iou_examples():
    assert iou((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)


def test_degenerate_iou_is_zero():
    assert iou((1, 1, 1, 1), (1, 1, 1, 1)) == 0.0
    assert iou((0, 0, 0, 5), (0, 0, 3, 3)) == 0.0


@settings(max_examples=300, deadline=None)
@given(int_box, int_box)
def test_iou_matches_rasterization(a, b):
    assert iou(a, b) == float(raster_iou(a, b))
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0


@settings(max_examples=200, deadline=None)
@given(int_box)
def test_iou_one_iff_identical(a):
    if (a[2] - a[0]) * (a[3] - a[1]) > 0:
        assert iou(a, a) == 1.0
        shifted = (a[0] + 1, a[1], a[2] + 1, a[3])
        assert iou(a, shifted) < 1.0


def test_pairwise_shape():
    a = np.array([[0, 0, 1, 1], [0, 0, 2, 2.0]])
    assert pairwise_iou(a, a[:1]).shape == (2, 1)
    assert as_boxes([]).shape == (0, 4)
    with pytest.raises(ValueError):
        as_boxes(np.zeros((3, 5)))


def test_anchor_single_cell():
    a = generate_anchors(1, 1, 16, [16], [1.0])
    np.testing.assert_allclose(a, [[0, 0, 16, 16]])


def test_anchor_tiling_centers():
    a = generate_anchors(2, 2, 16, [16], [1.0])
    centers = np.column_stack([(a[:, 0] + a[:, 2]) / 2, (a[:, 1] + a[:, 3]) / 2])
    np.testing.assert_allclose(centers, [[8, 8], [24, 8], [8, 24], [24, 24]])


def test_anchor_ratio_and_order():
    a = generate_anchors(1, 1, 16, [16], [2.0])[0]
    w, h = a[2] - a[0], a[3] - a[1]
    assert h / w == pytest.approx(2.0)
    assert w * h == pytest.approx(256.0)
    many = generate_anchors(2, 3, 4, [8, 16], [0.5, 1, 2])
    assert many.shape == (2 * 3 * 2 * 3, 4)
    # within one cell: scale-major, ratio-minor
    areas = (many[:6, 2] - many[:6, 0]) * (many[:6, 3] - many[:6, 1])
    np.testing.assert_allclose(areas, [64] * 3 + [256] * 3)


def test_anchor_bad_args():
    with pytest.raises(ValueError):
        generate_anchors(0, 1, 4, [8], [1])
    with pytest.raises(ValueError):
        generate_anchors(1, 1, 4, [], [1])


def test_label_examples():
    gt = [(0, 0, 10, 10)]
    assert label_anchors([(0, 0, 10, 10)], gt)[0] == AnchorLabel.FOREGROUND
    # the first anchor is the gt's best anchor; the disjoint one is background
    lab = label_anchors([(0, 0, 10, 10), (50, 50, 60, 60)], gt)
    assert list(lab) == [AnchorLabel.FOREGROUND, AnchorLabel.BACKGROUND]
    # IOU exactly 0.5 (area 50 inside area 100), with a better anchor present -> ignore
    lab = label_anchors([(0, 0, 10, 10), (0, 0, 10, 5)], gt)
    assert pairwise_iou((0, 0, 10, 5), gt[0])[0, 0] == 0.5
    assert lab[1] == AnchorLabel.IGNORE


def test_label_empty_gt_all_background():
    lab = label_anchors(generate_anchors(2, 2, 8, [8], [1]), [])
    assert np.all(lab == AnchorLabel.BACKGROUND)


def test_label_argmax_clause():
    # the gt overlaps its best anchor only at IOU 0.25, still foreground
    lab = label_anchors([(0, 0, 4, 4), (20, 20, 30, 30)], [(0, 0, 8, 8)])
    assert lab[0] == AnchorLabel.FOREGROUND


@settings(max_examples=100, deadline=None)
@given(st.lists(int_box, min_size=1, max_size=6))
def test_label_every_overlapped_gt_gets_foreground(gts):
    anchors = generate_anchors(3, 3, 4, [4, 8], [1.0])
    labels = label_anchors(anchors, gts)
    ov = pairwise_iou(anchors, gts)
    for j in range(len(gts)):
        if ov[:, j].max() > 0:
            assert np.any((labels == AnchorLabel.FOREGROUND) & (ov[:, j] == ov[:, j].max()))


def test_nms_examples():
    assert nms([(0, 0, 1, 1)], [0.5], 0.5) == [0]
    assert nms([(0, 0, 1, 1), (0, 0, 1, 1)], [0.9, 0.8], 0.5) == [0]
    # box1 overlaps box0 at IOU 0.6, box2 is far away
    boxes = [(0, 0, 10, 10), (0, 0, 10, 6), (50, 50, 60, 60)]
    assert iou(boxes[0], boxes[1]) == pytest.approx(0.6)
    assert nms(boxes, [0.9, 0.8, 0.7], 0.5) == [0, 2]
    assert nms(np.zeros((0, 4)), [], 0.5) == []


def test_nms_tie_break_lower_index():
    assert nms([(0, 0, 4, 4), (0, 0, 4, 4)], [0.5, 0.5], 0.5) == [0]
    assert nms([(0, 0, 4, 4), (10, 10, 14, 14)], [0.5, 0.5], 0.5) == [0, 1]


@settings(max_examples=300, deadline=None)
@given(st.lists(int_box, min_size=0, max_size=8), st.data(), st.sampled_from([0.3, 0.5, 0.7]))
def test_nms_matches_brute_force(boxes, data, thresh):
    scores = data.draw(st.lists(st.sampled_from([0.1, 0.4, 0.5, 0.9]), min_size=len(boxes),
                                max_size=len(boxes)))
    keep = nms(boxes, scores, thresh)
    assert keep == brute_nms(boxes, scores, thresh)
    for i in keep:
        for j in keep:
            if i != j:
                assert iou(boxes[i], boxes[j]) <= thresh
