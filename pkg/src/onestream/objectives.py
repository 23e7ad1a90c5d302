"""Training objective: Gaussian-weighted focal loss plus ℓ1 and GIoU box terms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .head import BBox, HeadMaps
from .tensor_core import Tensor

PROB_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    giou: float = 2.0
    l1: float = 5.0
    alpha: float = 2.0
    beta: float = 4.0


@dataclass
class TargetHeatmap:
    heatmap: np.ndarray          # (Gh, Gw)
    peak: tuple[int, int]        # (x, y) cell
    sigma: float


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """Corner-keypoint radius such that a box shifted by it keeps IoU ≥ ``min_overlap``.

    Three placements of the shifted corners give three quadratics; the
    smallest root wins. The root expressions follow the reference corner
    network code as published.
    """
    a1 = 1
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * a1 * c1)) / 2

    a2 = 4
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def peak_cell(box: BBox, grid: tuple[int, int]) -> tuple[int, int]:
    gh, gw = grid
    px = min(max(int(math.floor(box.cx * gw)), 0), gw - 1)
    py = min(max(int(math.floor(box.cy * gh)), 0), gh - 1)
    return px, py


def gaussian_target_map(box: BBox, grid: tuple[int, int]) -> TargetHeatmap:
    """Gaussian bump at the box centre cell with a size-adaptive σ (in cells)."""
    if box.w <= 0 or box.h <= 0:
        raise ValueError("degenerate box")
    gh, gw = grid
    px, py = peak_cell(box, grid)
    r = gaussian_radius(box.h * gh, box.w * gw)
    sigma = max(r / 3.0, 1.0)
    yy, xx = np.mgrid[0:gh, 0:gw]
    heat = np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2 * sigma ** 2))
    return TargetHeatmap(heat, (px, py), sigma)


def focal_loss(pred: Tensor, target: np.ndarray, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Summed penalty-reduced focal loss over all cells of ``pred``.

    Cells where ``target == 1`` are positives; every other cell is a
    negative down-weighted by ``(1 - target)^beta``.
    """
    target = np.asarray(target)
    if target.shape != pred.shape:
        raise ValueError(f"target {target.shape} vs prediction {pred.shape}")
    p = tc.clip(pred, PROB_EPS, 1 - PROB_EPS)
    pos = (target == 1).astype(p.data.dtype)
    neg_w = (1 - pos) * (1 - target) ** beta
    one_minus = tc.sub(1.0, p)
    pos_term = tc.mul(tc.pow_const(one_minus, alpha), tc.log(p))
    neg_term = tc.mul(tc.pow_const(p, alpha), tc.log(one_minus))
    total = tc.add(tc.mul(pos_term, pos), tc.mul(neg_term, neg_w))
    return tc.mul(tc.sum_(total), -1.0)


def _check_frames(a: BBox, b: BBox) -> None:
    if a.frame != b.frame:
        raise ValueError(f"boxes live in different frames: {a.frame} vs {b.frame}")


def iou(a: BBox, b: BBox) -> float:
    _check_frames(a, b)
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def giou(a: BBox, b: BBox) -> float:
    _check_frames(a, b)
    if a.w <= 0 or a.h <= 0 or b.w <= 0 or b.h <= 0:
        raise ValueError("GIoU needs boxes with positive size")
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.area + b.area - inter
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter / union - (hull - union) / hull


def giou_tensor(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable GIoU of (…, 4) centre-size boxes against fixed targets."""
    gt = np.asarray(gt, dtype=pred.data.dtype)
    cx, cy, w, h = (pred[..., i] for i in range(4))
    half_w, half_h = tc.mul(w, 0.5), tc.mul(h, 0.5)
    px0, px1 = tc.sub(cx, half_w), tc.add(cx, half_w)
    py0, py1 = tc.sub(cy, half_h), tc.add(cy, half_h)
    gx0 = gt[..., 0] - gt[..., 2] / 2
    gx1 = gt[..., 0] + gt[..., 2] / 2
    gy0 = gt[..., 1] - gt[..., 3] / 2
    gy1 = gt[..., 1] + gt[..., 3] / 2
    iw = tc.relu(tc.sub(tc.minimum(px1, gx1), tc.maximum(px0, gx0)))
    ih = tc.relu(tc.sub(tc.minimum(py1, gy1), tc.maximum(py0, gy0)))
    inter = tc.mul(iw, ih)
    union = tc.sub(tc.add(tc.mul(w, h), gt[..., 2] * gt[..., 3]), inter)
    hull = tc.mul(tc.sub(tc.maximum(px1, gx1), tc.minimum(px0, gx0)),
                  tc.sub(tc.maximum(py1, gy1), tc.minimum(py0, gy0)))
    return tc.sub(tc.div(inter, union), tc.div(tc.sub(hull, union), hull))


def box_at_cells(maps: HeadMaps, cells: np.ndarray) -> Tensor:
    """(B, 4) centre-size boxes read from offset/size maps at the given (x, y) cells."""
    gh, gw = maps.grid
    b = np.arange(cells.shape[0])
    xs, ys = cells[:, 0], cells[:, 1]
    off = maps.offset[b, :, ys, xs]   # (B, 2)
    size = maps.size[b, :, ys, xs]    # (B, 2)
    base = np.stack([xs / gw, ys / gh], axis=1)
    centre = tc.add(tc.mul(off, np.array([1.0 / gw, 1.0 / gh])), base)
    return tc.concat([centre, size], axis=1)


@dataclass
class LossBreakdown:
    total: Tensor
    cls: float
    giou: float
    l1: float


def total_loss(maps: HeadMaps, gt_boxes: np.ndarray, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Batch-mean of L_cls + λ_giou·(1 − GIoU) + λ_l1·ℓ1.

    ``maps`` are batched (B, …); ``gt_boxes`` is (B, 4) centre-size in
    search-normalised units. Box terms are read at each ground-truth peak cell.
    """
    gt_boxes = np.atleast_2d(np.asarray(gt_boxes, dtype=np.float64))
    if maps.score.ndim == 2:
        maps = _batch1(maps)
    grid = maps.grid
    batch = gt_boxes.shape[0]
    targets, cells = [], []
    for row in gt_boxes:
        t = gaussian_target_map(BBox(*row), grid)
        targets.append(t.heatmap)
        cells.append(t.peak)
    cells = np.array(cells)
    l_cls = tc.mul(focal_loss(maps.score, np.stack(targets), weights.alpha, weights.beta), 1.0 / batch)
    pred = box_at_cells(maps, cells)
    l_giou = tc.mean(tc.sub(1.0, giou_tensor(pred, gt_boxes)))
    l_l1 = tc.mean(tc.abs_(tc.sub(pred, gt_boxes)))
    total = tc.add(l_cls, tc.add(tc.mul(l_giou, weights.giou), tc.mul(l_l1, weights.l1)))
    return LossBreakdown(total, float(l_cls.data), float(l_giou.data), float(l_l1.data))


def _batch1(maps: HeadMaps) -> HeadMaps:
    return HeadMaps(tc.reshape(maps.score, (1,) + maps.score.shape),
                    tc.reshape(maps.offset, (1,) + maps.offset.shape),
                    tc.reshape(maps.size, (1,) + maps.size.shape))
