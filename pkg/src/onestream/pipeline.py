"""Cropping, the frame-by-frame tracker, and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from . import tensor_core as tc
from .bench import SynthScene, SynthSpec, evaluate_metrics, synth_sequence
from .config import ModelConfig, TrainConfig
from .elimination import center_token_index
from .head import BBox, Frame, decode_box
from .imageio import write_pnm
from .model import TrackerNet
from .objectives import LossWeights, total_loss

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# cropping


@dataclass(frozen=True)
class CropMapping:
    """Square crop of side ``side`` at top-left (x0, y0), resized to ``out_size``."""

    x0: float
    y0: float
    side: float
    out_size: int

    def to_frame(self, box: BBox) -> BBox:
        if box.frame is not Frame.SEARCH_NORMALIZED:
            raise ValueError("expected a crop-normalised box")
        s = self.side
        return BBox(self.x0 + box.cx * s, self.y0 + box.cy * s, box.w * s, box.h * s, Frame.FRAME_PIXELS)

    def to_crop(self, box: BBox) -> BBox:
        if box.frame is not Frame.FRAME_PIXELS:
            raise ValueError("expected a frame-pixel box")
        s = self.side
        return BBox((box.cx - self.x0) / s, (box.cy - self.y0) / s, box.w / s, box.h / s,
                    Frame.SEARCH_NORMALIZED)


def to_pixels(img: np.ndarray) -> np.ndarray:
    """H×W×3 uint8 → 3×H×W float32 in [-1, 1]."""
    return (img.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def crop_region(frame: np.ndarray, box: BBox, factor: float, out_size: int) -> tuple[np.ndarray, CropMapping]:
    """Square crop of side factor·√(w·h) around the box centre, resized to ``out_size``.

    Area outside the frame is filled with the frame's per-channel mean.
    Returns the uint8 crop and the coordinate mapping.
    """
    if factor <= 0:
        raise ValueError("crop factor must be positive")
    if box.w <= 0 or box.h <= 0:
        raise ValueError("crop box must have positive size")
    side = factor * math.sqrt(box.w * box.h)
    x0 = box.cx - side / 2
    y0 = box.cy - side / 2
    scale = out_size / side
    # continuous coords u = (x − x0)·scale; cv2 works on pixel centres (x − 0.5)
    m = np.array([[scale, 0, (0.5 - x0) * scale - 0.5],
                  [0, scale, (0.5 - y0) * scale - 0.5]], dtype=np.float64)
    fill = tuple(float(v) for v in frame.reshape(-1, frame.shape[-1]).mean(axis=0))
    crop = cv2.warpAffine(frame, m, (out_size, out_size), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=fill)
    return crop, CropMapping(x0, y0, side, out_size)


def hanning_window(g: int) -> np.ndarray:
    i = np.arange(g)
    h = 0.5 * (1 - np.cos(2 * np.pi * i / (g - 1))) if g > 1 else np.ones(1)
    return np.outer(h, h)


# ---------------------------------------------------------------------------
# tracking


@dataclass
class TrackerState:
    net: TrackerNet
    template: np.ndarray           # 3×Hz×Wz, fixed after init
    template_box: np.ndarray       # (cx, cy, w, h) normalised to the template crop
    prev_box: BBox                 # frame pixels
    frame_size: tuple[int, int]
    hanning: bool = True
    last_score: np.ndarray | None = field(default=None, repr=False)


def init_tracker(net: TrackerNet, frame: np.ndarray, box: BBox, hanning: bool | None = None) -> TrackerState:
    if box.frame is not Frame.FRAME_PIXELS or box.w <= 0 or box.h <= 0:
        raise ValueError("init box must be a positive-size frame-pixel box")
    cfg = net.cfg
    crop, mapping = crop_region(frame, box, cfg.template_factor, cfg.template_size)
    tbox = mapping.to_crop(box).as_array()
    return TrackerState(net, to_pixels(crop), tbox, box, frame.shape[:2],
                        cfg.hanning if hanning is None else hanning)


def _clamp_to_frame(box: BBox, frame_size) -> BBox:
    fh, fw = frame_size
    w = float(np.clip(box.w, 2.0, fw))
    h = float(np.clip(box.h, 2.0, fh))
    cx = float(np.clip(box.cx, 0.0, fw))
    cy = float(np.clip(box.cy, 0.0, fh))
    return BBox(cx, cy, w, h, Frame.FRAME_PIXELS)


def track_frame(state: TrackerState, frame: np.ndarray) -> BBox:
    cfg = state.net.cfg
    crop, mapping = crop_region(frame, state.prev_box, cfg.search_factor, cfg.search_size)
    res = state.net.forward(state.template, to_pixels(crop), state.template_box, mode="eval")
    score = res.maps.score.data
    if state.hanning:
        score = score * hanning_window(score.shape[0])
    state.last_score = score
    local = decode_box(score, res.maps.offset.data, res.maps.size.data)
    box = _clamp_to_frame(mapping.to_frame(local), state.frame_size)
    state.prev_box = box
    return box


def run_sequence(net: TrackerNet, frames, init_xywh, hanning: bool | None = None) -> np.ndarray:
    """Track a whole sequence; returns (T, 4) x y w h boxes with frame 0 = init box."""
    state = init_tracker(net, frames[0], BBox.from_xywh(*init_xywh), hanning)
    out = [list(init_xywh)]
    for f in frames[1:]:
        out.append(list(track_frame(state, f).xywh()))
    return np.array(out)


def evaluate_synthetic(net: TrackerNet, seeds, spec: SynthSpec | None = None) -> dict[str, float]:
    """Track held-out synthetic sequences; metrics pool all non-initial frames."""
    spec = spec or SynthSpec()
    preds, gts = [], []
    for seed in seeds:
        frames, gt = synth_sequence(SynthSpec(**{**vars(spec), "seed": int(seed)}))
        pred = run_sequence(net, frames, gt[0])
        preds.append(pred[1:])
        gts.append(gt[1:])
    return evaluate_metrics(np.concatenate(preds), np.concatenate(gts))


# ---------------------------------------------------------------------------
# training


@dataclass
class Batch:
    template: np.ndarray       # B×3×Hz×Wz
    search: np.ndarray         # B×3×Hx×Wx
    template_box: np.ndarray   # B×4
    search_box: np.ndarray     # B×4, centre-size, search-normalised


def sample_pair(rng: np.random.Generator, cfg: ModelConfig, tcfg: TrainConfig):
    """One (template, search, template box, search box) training sample."""
    spec = SynthSpec(frame_height=tcfg.frame_size, frame_width=tcfg.frame_size,
                     length=tcfg.max_gap + 1, distractors=int(rng.integers(0, tcfg.distractors + 1)),
                     distractor_similarity=float(rng.uniform(0, 0.6)),
                     seed=int(rng.integers(2 ** 31)))
    scene = SynthScene(spec)
    t1 = 0
    t2 = int(rng.integers(0, tcfg.max_gap + 1))
    box1 = BBox.from_xywh(*scene.gt_box(t1))
    box2 = BBox.from_xywh(*scene.gt_box(t2))
    zcrop, zmap = crop_region(scene.render(t1), box1, cfg.template_factor, cfg.template_size)

    scale = math.exp(rng.normal() * tcfg.scale_jitter)
    jw, jh = box2.w * scale, box2.h * scale
    reach = math.sqrt(jw * jh) * tcfg.center_jitter
    jc = np.array([box2.cx, box2.cy]) + reach * (rng.uniform(size=2) - 0.5)
    jbox = BBox(float(jc[0]), float(jc[1]), jw, jh, Frame.FRAME_PIXELS)
    xcrop, xmap = crop_region(scene.render(t2), jbox, cfg.search_factor, cfg.search_size)
    zbox = zmap.to_crop(box1).as_array()
    xbox = xmap.to_crop(box2).as_array()

    gain = rng.uniform(0.8, 1.2)
    zcrop = np.clip(zcrop * gain, 0, 255).astype(np.uint8)
    xcrop = np.clip(xcrop * gain, 0, 255).astype(np.uint8)
    if rng.uniform() < 0.5:
        zcrop, xcrop = zcrop[:, ::-1], xcrop[:, ::-1]
        zbox[0] = 1 - zbox[0]
        xbox[0] = 1 - xbox[0]
    xbox[:2] = np.clip(xbox[:2], 0, 1 - 1e-6)
    return to_pixels(zcrop), to_pixels(xcrop), zbox, xbox


def make_batch(rng, cfg: ModelConfig, tcfg: TrainConfig) -> Batch:
    items = [sample_pair(rng, cfg, tcfg) for _ in range(tcfg.batch_size)]
    return Batch(*(np.stack(col) for col in zip(*items)))


def lr_scale(step: int, tcfg: TrainConfig) -> float:
    warm = min(1.0, (step + 1) / tcfg.warmup_steps) if tcfg.warmup_steps else 1.0
    return warm * tc.step_decay_lr(1.0, step, tcfg.steps, tcfg.lr_drop_fraction)


def train(cfg: ModelConfig, tcfg: TrainConfig, net: TrackerNet | None = None,
          weights: LossWeights = LossWeights()) -> tuple[TrackerNet, list[dict]]:
    """AdamW training on freshly generated synthetic pairs.

    Two parameter groups: the embedder+encoder ("backbone") and the head.
    Candidate elimination is active during training; only kept tokens
    receive gradient.
    """
    net = net or TrackerNet(cfg)
    rng = np.random.default_rng(tcfg.seed)
    groups = [
        (net.backbone_params(), tc.OptimState(lr=tcfg.lr_backbone, weight_decay=tcfg.weight_decay)),
        (net.head_params(), tc.OptimState(lr=tcfg.lr_other, weight_decay=tcfg.weight_decay)),
    ]
    base_lrs = [opt.lr for _, opt in groups]
    history = []
    t0 = time.time()
    running = None
    for step in range(tcfg.steps):
        batch = make_batch(rng, cfg, tcfg)
        with tc.Tape() as tape:
            res = net.forward(batch.template, batch.search, batch.template_box, mode="train")
            loss = total_loss(res.maps, batch.search_box, weights)
        params = net.parameters()
        tc.zero_grad(params.values())
        tc.backward_pass(tape, loss.total)
        scale = lr_scale(step, tcfg)
        for (group, opt), base in zip(groups, base_lrs):
            opt.lr = base * scale
            grads = {k: p.grad for k, p in group.items() if p.grad is not None}
            tc.adamw_step(group, grads, opt)
        value = float(loss.total.data)
        running = value if running is None else 0.95 * running + 0.05 * value
        history.append({"step": step, "loss": value, "cls": loss.cls, "giou": loss.giou, "l1": loss.l1})
        if tcfg.log_every and (step + 1) % tcfg.log_every == 0:
            log.info("step %d/%d loss %.4f (cls %.3f giou %.3f l1 %.3f) %.1fs",
                     step + 1, tcfg.steps, running, loss.cls, loss.giou, loss.l1, time.time() - t0)
    return net, history


# ---------------------------------------------------------------------------
# attention visualisation


def attention_maps(net: TrackerNet, template: np.ndarray, search: np.ndarray) -> list[np.ndarray]:
    """Per-layer head-averaged attention of the centre template token over the search grid.

    Eliminated positions come back as NaN.
    """
    cfg = net.cfg
    res = net.forward(template, search)
    gh, gw = cfg.search_grid
    phi = center_token_index(cfg.template_grid)
    maps = []
    for rec in res.records:
        row = rec.weights[:, phi, rec.n_template:].mean(axis=0)
        grid = np.full(gh * gw, np.nan)
        grid[rec.search_orig_index] = row
        maps.append(grid.reshape(gh, gw))
    return maps


def dump_attention(net: TrackerNet, template_img: np.ndarray, search_img: np.ndarray, out_dir) -> list[Path]:
    """Write one grayscale PGM per layer; eliminated cells are black."""
    cfg = net.cfg
    if template_img.shape[:2] != (cfg.template_size,) * 2:
        template_img = cv2.resize(template_img, (cfg.template_size,) * 2, interpolation=cv2.INTER_LINEAR)
    if search_img.shape[:2] != (cfg.search_size,) * 2:
        search_img = cv2.resize(search_img, (cfg.search_size,) * 2, interpolation=cv2.INTER_LINEAR)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for layer, grid in enumerate(attention_maps(net, to_pixels(template_img), to_pixels(search_img)), 1):
        kept = ~np.isnan(grid)
        img = np.zeros(grid.shape, dtype=np.uint8)
        if kept.any():
            vals = grid[kept]
            lo, hi = vals.min(), vals.max()
            norm = (vals - lo) / (hi - lo) if hi > lo else np.ones_like(vals)
            img[kept] = np.rint(32 + 223 * norm).astype(np.uint8)
        img = np.kron(img, np.ones((cfg.patch_size, cfg.patch_size), dtype=np.uint8))
        path = out / f"layer_{layer:02d}.pgm"
        write_pnm(path, img)
        paths.append(path)
    return paths
