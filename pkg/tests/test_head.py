import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radarsnn.boxes import Box3D, rotated_iou_bev
from radarsnn.head import (AnchorSpec, Detection, HeadConfig, assign_targets, decode, decode_boxes, encode,
                           flatten_head, focal_loss, make_anchors, nms_bev, read_detections, smooth_l1,
                           unflatten_head, write_detections)
from radarsnn.ops import Tape
from radarsnn.points import VoxelGridSpec

GRID = VoxelGridSpec(x_range=(0, 16), y_range=(-8, 8), z_range=(-1, 3), shape=(4, 16, 16))


def test_anchor_layout():
    a = make_anchors(GRID)
    assert a.shape == (16 * 16 * 2, 7)
    # (y, x, a) order: consecutive rows share a cell and differ in yaw
    assert a[0, :2].tolist() == a[1, :2].tolist() == [0.5, -7.5]
    assert a[0, 6] == 0 and a[1, 6] == pytest.approx(math.pi / 2)
    assert a[2, 0] == 1.5


def test_flatten_round_trip():
    raw = np.random.default_rng(0).normal(size=(16, 5, 6))
    rows = flatten_head(raw, 2)
    assert rows.shape == (60, 8)
    # row for (y=1, x=2, a=1) holds channels 8..15 at that pixel
    np.testing.assert_array_equal(rows[(1 * 6 + 2) * 2 + 1], raw[8:16, 1, 2])
    np.testing.assert_array_equal(unflatten_head(rows, 5, 6, 2), raw)


def test_assign_anchor_equal_to_gt():
    anchors = make_anchors(GRID)
    i = 37
    gt = Box3D.from_array(anchors[i])
    t = assign_targets(anchors, [gt])
    assert t.labels[i] == 1
    np.testing.assert_allclose(t.residuals[i], 0, atol=1e-12)
    far = np.hypot(anchors[:, 0] - gt.cx, anchors[:, 1] - gt.cy) > 8
    assert np.all(t.labels[far] == 0)


def test_residual_shift():
    anchor = np.array([[0, 0, 0, 4, 3, 1.5, 0]])  # diagonal 5
    r = encode(np.array([[1, 0, 0, 4, 3, 1.5, 0]]), anchor)
    assert r[0, 0] == pytest.approx(0.2)


def test_gates_and_force_match():
    anchors = make_anchors(GRID)
    gt = Box3D(8.3, 0.2, 0.8, 4.4, 1.8, 1.5, math.pi / 4)
    cfg = HeadConfig(force_match=False)
    t = assign_targets(anchors, [gt], cfg)
    iou = np.array([rotated_iou_bev(Box3D.from_array(a), gt) for a in anchors])
    assert np.all(t.labels[iou >= 0.5] == 1)
    assert np.all(t.labels[iou < 0.35] == 0)
    assert np.all(t.labels[(iou >= 0.35) & (iou < 0.5)] == -1)
    forced = assign_targets(anchors, [gt], HeadConfig(force_match=True))
    assert forced.labels[int(iou.argmax())] == 1


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-0.5, 0.5), st.floats(3, 6), st.floats(1.5, 2.5),
       st.floats(1.2, 2.0), st.floats(-math.pi, math.pi), st.sampled_from([0.0, math.pi / 2]))
def test_encode_decode_round_trip(dx, dy, dz, l, w, h, yaw, anchor_yaw):
    anchor = np.array([[10.0, 0.0, 0.8, 4.5, 1.9, 1.6, anchor_yaw]])
    gt = np.array([[10 + dx, dy, 0.8 + dz, l, w, h, Box3D(0, 0, 0, 1, 1, 1, yaw).yaw]])
    back = decode_boxes(encode(gt, anchor, 2 * math.pi), anchor)
    np.testing.assert_allclose(back[0, :6], gt[0, :6], atol=1e-6)
    d = (back[0, 6] - gt[0, 6] + math.pi) % (2 * math.pi) - math.pi
    assert abs(d) < 1e-6


def test_yaw_period_pi_folds_heading():
    anchor = np.array([[0, 0, 0, 4.5, 1.9, 1.6, 0.0]])
    r = encode(np.array([[0, 0, 0, 4.5, 1.9, 1.6, math.pi - 0.1]]), anchor, math.pi)
    assert r[0, 6] == pytest.approx(-0.1)


# --- losses ----------------------------------------------------------------

def test_focal_scalar():
    assert float(focal_loss(np.array([0.0]), np.array([1]))) == pytest.approx(0.25 * 0.25 * math.log(2))
    assert float(focal_loss(np.array([40.0]), np.array([1]))) == pytest.approx(0.0, abs=1e-12)


def test_focal_all_ignored_warns():
    with pytest.warns(RuntimeWarning):
        assert float(focal_loss(np.array([0.3, -2.0]), np.array([-1, -1]))) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-8, 8), st.sampled_from([-1, 0, 1])), min_size=1, max_size=40))
def test_focal_gamma_zero_is_weighted_bce(items):
    x = np.array([v for v, _ in items])
    y = np.array([t for _, t in items])
    keep = y >= 0
    if not keep.any():
        return
    p = 1 / (1 + np.exp(-x))
    bce = np.where(y == 1, -0.25 * np.log(p), -0.75 * np.log(1 - p))
    assert float(focal_loss(x, y, gamma=0.0)) == pytest.approx(bce[keep].mean(), rel=1e-9, abs=1e-12)


def test_focal_gradient_fd():
    rng = np.random.default_rng(0)
    x = rng.normal(size=20) * 3
    y = rng.integers(-1, 2, size=20)
    tape = Tape()
    out = focal_loss(x, y, tape=tape)
    g = tape.backward(out).of(x)
    eps = 1e-6
    for i in range(20):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        fd = (float(focal_loss(xp, y)) - float(focal_loss(xm, y))) / (2 * eps)
        assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_smooth_l1_pieces():
    assert float(smooth_l1(np.array([0.0]), np.array([0.0]))) == 0.0
    assert float(smooth_l1(np.array([0.5]), np.array([0.0]))) == pytest.approx(0.125)
    assert float(smooth_l1(np.array([2.0]), np.array([0.0]))) == pytest.approx(1.5)
    # mean over positives x 7 channels
    pred = np.zeros((2, 7))
    pred[0, 0] = 2.0
    assert float(smooth_l1(pred, np.zeros((2, 7)))) == pytest.approx(1.5 / 14)


# --- decode / NMS / IO -----------------------------------------------------

def test_decode_identity_and_threshold():
    anchors = make_anchors(GRID)[:4]
    rows = np.zeros((4, 8))
    rows[:, 0] = [5, -5, 5, -5]
    dets = decode(rows, anchors, 0.3, "f")
    assert len(dets) == 2
    np.testing.assert_allclose(dets[0].box.to_array(), anchors[0])
    assert decode(np.full((4, 8), -9.0), anchors) == []


def test_decode_assign_round_trip():
    anchors = make_anchors(GRID)
    gt = Box3D(8.2, 1.1, 0.9, 4.3, 1.8, 1.5, 0.3)
    t = assign_targets(anchors, [gt], HeadConfig(yaw_period=2 * math.pi))
    i = t.positives[0]
    rows = np.zeros((1, 8))
    rows[0, 0] = 10
    rows[0, 1:] = t.residuals[i]
    (d,) = decode(rows, anchors[i:i + 1])
    np.testing.assert_allclose(d.box.to_array(), gt.to_array(), atol=1e-6)


def _det(x, score, yaw=0.0):
    return Detection(Box3D(x, 0, 0.8, 4, 2, 1.5, yaw), score, "f")


def test_nms_cases():
    a = _det(0, 0.9)
    assert nms_bev([a, _det(0, 0.8)]) == [a]
    far = [_det(0, 0.5), _det(20, 0.6), _det(40, 0.7)]
    assert len(nms_bev(far)) == 3
    # chain: A overlaps B, B overlaps C, A and C disjoint -> keep A and C
    chain = [_det(0, 0.9), _det(3, 0.8), _det(6, 0.7)]
    kept = nms_bev(chain, 0.1)
    assert [d.box.cx for d in kept] == [0, 6]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 20), st.floats(-5, 5), st.floats(0.31, 1.0), st.floats(-3, 3)),
                max_size=12))
def test_nms_properties(items):
    dets = [Detection(Box3D(x, y, 0.8, 4.5, 1.9, 1.6, yaw), s, "f") for x, y, s, yaw in items]
    kept = nms_bev(dets, 0.1)
    scores = [d.score for d in kept]
    assert scores == sorted(scores, reverse=True)
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            assert rotated_iou_bev(kept[i].box, kept[j].box) <= 0.1


def test_detection_csv_round_trip(tmp_path):
    dets = [_det(1.25, 0.5), Detection(Box3D(3, -2, 1, 4.4, 1.8, 1.5, -1.0), 0.75, "g")]
    write_detections(tmp_path / "d.csv", dets)
    back = read_detections(tmp_path / "d.csv")
    assert [(d.frame_id, d.score) for d in back] == [("f", 0.5), ("g", 0.75)]
    np.testing.assert_allclose(back[1].box.to_array(), dets[1].box.to_array(), atol=1e-6)
