import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import focal, giou_xywh

from onestream import tensor_core as tc
from onestream.head import BBox, Frame, HeadMaps
from onestream.objectives import (LossWeights, focal_loss, gaussian_target_map, giou, giou_tensor,
                                  iou, total_loss)
from onestream.tensor_core import Tensor


# -- target heatmap -----------------------------------------------------------

def test_peak_value_is_one():
    t = gaussian_target_map(BBox(0.4, 0.6, 0.2, 0.3), (16, 16))
    px, py = t.peak
    assert t.heatmap[py, px] == 1.0
    assert t.heatmap.max() == 1.0


def test_half_height_distance():
    t = gaussian_target_map(BBox(0.5, 0.5, 0.3, 0.3), (16, 16))
    d = t.sigma * math.sqrt(2 * math.log(2))
    assert math.exp(-d ** 2 / (2 * t.sigma ** 2)) == pytest.approx(0.5, abs=1e-15)


def test_center_peak_cell():
    assert gaussian_target_map(BBox(0.5, 0.5, 0.2, 0.2), (16, 16)).peak == (8, 8)


def test_sigma_floor():
    assert gaussian_target_map(BBox(0.5, 0.5, 0.01, 0.01), (16, 16)).sigma == 1.0


def test_heatmap_decreases_with_distance():
    t = gaussian_target_map(BBox(0.3, 0.7, 0.25, 0.2), (12, 12))
    px, py = t.peak
    yy, xx = np.mgrid[0:12, 0:12]
    dist = ((xx - px) ** 2 + (yy - py) ** 2).reshape(-1)
    vals = t.heatmap.reshape(-1)
    order = np.argsort(dist)
    d, v = dist[order], vals[order]
    farther = d[1:] > d[:-1]
    assert np.all(v[1:][farther] < v[:-1][farther])


def test_degenerate_box():
    with pytest.raises(ValueError):
        gaussian_target_map(BBox(0.5, 0.5, 0.0, 0.1), (4, 4))


# -- focal loss ---------------------------------------------------------------

def test_focal_perfect_prediction_is_zero():
    target = np.zeros((4, 4))
    target[1, 2] = 1
    assert float(focal_loss(Tensor(target.copy()), target).data) == pytest.approx(0.0, abs=1e-10)


def test_focal_single_positive_cell():
    got = float(focal_loss(Tensor(np.array([[0.5]], np.float64)), np.array([[1.0]])).data)
    assert got == pytest.approx(0.25 * math.log(2), abs=1e-6)
    assert got == pytest.approx(0.1733, abs=1e-4)


def test_focal_single_negative_cell():
    got = float(focal_loss(Tensor(np.array([[0.5]])), np.array([[0.5]])).data)
    assert got == pytest.approx(0.5 ** 4 * 0.5 ** 2 * math.log(2), abs=1e-6)
    assert got == pytest.approx(0.01083, abs=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 16))
def test_focal_matches_oracle_and_is_nonnegative(seed):
    rng = np.random.default_rng(seed)
    target = gaussian_target_map(BBox(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.1, 0.4, 2)), (6, 6)).heatmap
    pred = rng.random((6, 6))
    with tc.precision(np.float64):
        got = float(focal_loss(Tensor(pred), target).data)
    assert got >= 0
    assert got == pytest.approx(focal(pred, target), rel=1e-9)


def test_focal_clamps_exact_zero_and_one():
    target = np.array([[1.0, 0.0]])
    assert np.isfinite(float(focal_loss(Tensor([[0.0, 1.0]]), target).data))


def test_focal_gradient_fd():
    rng = np.random.default_rng(0)
    pred = Tensor(rng.uniform(0.1, 0.9, (5, 5)), requires_grad=True)
    target = gaussian_target_map(BBox(0.5, 0.5, 0.4, 0.4), (5, 5)).heatmap
    assert tc.finite_difference_check(lambda: focal_loss(pred, target), [pred]) < 1e-3


# -- GIoU ---------------------------------------------------------------------

def corner(x, y, w, h):
    return BBox.from_xywh(x, y, w, h, Frame.SEARCH_NORMALIZED)


def test_giou_identical():
    b = corner(0.1, 0.2, 0.3, 0.4)
    assert giou(b, b) == pytest.approx(1.0)


def test_giou_disjoint_corners():
    assert giou(corner(0, 0, 1, 1), corner(2, 2, 1, 1)) == pytest.approx(-7 / 9, abs=1e-12)


def test_giou_nested_quarter():
    outer, inner = corner(0, 0, 2, 2), corner(0.5, 0.5, 1, 1)
    assert giou(outer, inner) == pytest.approx(0.25)
    assert iou(outer, inner) == pytest.approx(0.25)


def test_giou_frame_mismatch():
    with pytest.raises(ValueError):
        giou(corner(0, 0, 1, 1), BBox.from_xywh(0, 0, 1, 1))


box_st = st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 5), st.floats(0.1, 5))


@settings(max_examples=100, deadline=None)
@given(box_st, box_st, st.floats(-3, 3), st.floats(-3, 3))
def test_giou_properties(a, b, dx, dy):
    ba, bb = corner(*a), corner(*b)
    g = giou(ba, bb)
    assert g == pytest.approx(giou(bb, ba), abs=1e-12)
    assert g <= iou(ba, bb) + 1e-12
    assert -1 < g <= 1 + 1e-12
    assert g == pytest.approx(giou_xywh(a, b), abs=1e-9)
    a2 = (a[0] + dx, a[1] + dy, a[2], a[3])
    b2 = (b[0] + dx, b[1] + dy, b[2], b[3])
    assert giou(corner(*a2), corner(*b2)) == pytest.approx(g, abs=1e-9)


def test_giou_tensor_matches_scalar():
    rng = np.random.default_rng(1)
    pred = rng.uniform(0.2, 0.6, (6, 4))
    gt = rng.uniform(0.2, 0.6, (6, 4))
    with tc.precision(np.float64):
        got = giou_tensor(Tensor(pred), gt).data
    ref = [giou(BBox(*p), BBox(*g)) for p, g in zip(pred, gt)]
    np.testing.assert_allclose(got, ref, atol=1e-12)


# -- total loss ---------------------------------------------------------------

def perfect_maps(gt, grid=(8, 8)):
    t = gaussian_target_map(BBox(*gt), grid)
    px, py = t.peak
    gh, gw = grid
    score = (t.heatmap == 1).astype(float)  # the focal optimum is the indicator, not the bump
    off = np.zeros((2,) + grid)
    size = np.zeros((2,) + grid)
    off[:, py, px] = (gt[0] * gw - px, gt[1] * gh - py)
    size[:, py, px] = gt[2:]
    return score, off, size, (px, py)


def test_total_loss_perfect():
    gt = np.array([0.43, 0.57, 0.3, 0.2])
    score, off, size, _ = perfect_maps(gt)
    with tc.precision(np.float64):
        out = total_loss(HeadMaps(Tensor(score), Tensor(off), Tensor(size)), gt)
    assert float(out.total.data) == pytest.approx(0.0, abs=1e-9)


def test_total_loss_is_weighted_sum_of_gaps():
    gt = np.array([0.43, 0.57, 0.3, 0.2])
    score, off, size, (px, py) = perfect_maps(gt)
    size[:, py, px] = (0.36, 0.2)  # wider prediction, same centre
    with tc.precision(np.float64):
        out = total_loss(HeadMaps(Tensor(score), Tensor(off), Tensor(size)), gt)
    g = 1 - giou(BBox(0.43, 0.57, 0.36, 0.2), BBox(*gt))
    m = 0.06 / 4
    assert float(out.total.data) == pytest.approx(2 * g + 5 * m, abs=1e-9)


def test_total_loss_random_instance_matches_components():
    rng = np.random.default_rng(7)
    grid = (6, 6)
    gts = rng.uniform(0.25, 0.6, (3, 4))
    score, off, size = rng.uniform(0.05, 0.95, (3,) + grid), rng.random((3, 2) + grid), rng.random((3, 2) + grid)
    with tc.precision(np.float64):
        out = total_loss(HeadMaps(Tensor(score), Tensor(off), Tensor(size)), gts)
    cls, gl, l1 = [], [], []
    for b, gt in enumerate(gts):
        t = gaussian_target_map(BBox(*gt), grid)
        px, py = t.peak
        cls.append(focal(score[b], t.heatmap))
        pred = ((px + off[b, 0, py, px]) / 6, (py + off[b, 1, py, px]) / 6, size[b, 0, py, px], size[b, 1, py, px])
        pc = (pred[0] - pred[2] / 2, pred[1] - pred[3] / 2, pred[2], pred[3])
        gc = (gt[0] - gt[2] / 2, gt[1] - gt[3] / 2, gt[2], gt[3])
        gl.append(1 - giou_xywh(pc, gc))
        l1.append(np.abs(np.array(pred) - gt).mean())
    w = LossWeights()
    expected = np.mean(cls) + w.giou * np.mean(gl) + w.l1 * np.mean(l1)
    assert float(out.total.data) == pytest.approx(expected, rel=1e-9)
    assert out.cls == pytest.approx(np.mean(cls), rel=1e-9)


def test_total_loss_gradients_fd():
    rng = np.random.default_rng(8)
    grid = (4, 4)
    score = Tensor(rng.uniform(0.1, 0.9, (2,) + grid), requires_grad=True)
    off = Tensor(rng.uniform(0.2, 0.8, (2, 2) + grid), requires_grad=True)
    size = Tensor(rng.uniform(0.2, 0.5, (2, 2) + grid), requires_grad=True)
    gts = np.array([[0.4, 0.45, 0.3, 0.35], [0.6, 0.55, 0.25, 0.4]])
    err = tc.finite_difference_check(lambda: total_loss(HeadMaps(score, off, size), gts).total,
                                     [score, off, size], h=1e-4)
    assert err < 1e-2
