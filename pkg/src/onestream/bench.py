"""Synthetic sequences, tracking metrics and the analytic MACs model."""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .elimination import keep_count
from .encoder import AttentionConfig
from .imageio import write_boxes, write_pnm

# ---------------------------------------------------------------------------
# synthetic video


@dataclass
class SynthSpec:
    frame_height: int = 192
    frame_width: int = 192
    length: int = 60
    min_size: int = 16
    max_size: int = 40
    max_speed: float = 3.0
    distractors: int = 2
    distractor_similarity: float = 0.3
    noise: float = 6.0
    seed: int = 0

    def validate(self) -> None:
        if self.max_size + 2 > min(self.frame_height, self.frame_width):
            raise ValueError("target cannot fit inside the frame")
        if not 0 < self.min_size <= self.max_size:
            raise ValueError("bad target size range")
        if self.length < 1:
            raise ValueError("sequence needs at least one frame")
        if not 0 <= self.distractor_similarity <= 1:
            raise ValueError("distractor_similarity must lie in [0, 1]")


@dataclass
class _Mover:
    w: float
    h: float
    x0: float
    y0: float
    vx: float
    vy: float
    color: np.ndarray
    inner: np.ndarray | None

    def box(self, t: int, fw: int, fh: int) -> tuple[float, float, float, float]:
        x = _bounce(self.x0 + self.vx * t, 1.0, fw - 1.0 - self.w)
        y = _bounce(self.y0 + self.vy * t, 1.0, fh - 1.0 - self.h)
        return x, y, self.w, self.h


def _bounce(p: float, lo: float, hi: float) -> float:
    span = hi - lo
    if span <= 0:
        return lo
    q = (p - lo) % (2 * span)
    return lo + (2 * span - q if q > span else q)


class SynthScene:
    """Deterministic scene description; any frame can be rendered on its own."""

    def __init__(self, spec: SynthSpec):
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        fw, fh = spec.frame_width, spec.frame_height
        self.bg = rng.integers(0, 256, (2, 3)).astype(np.float64) * 0.6 + 40
        self.bg_angle = rng.uniform(0, 2 * np.pi)
        self._bg_cache = None
        self.target = self._mover(rng, fw, fh, rng.integers(30, 226, 3).astype(np.float64), inner=True)
        self.distractors = []
        for _ in range(spec.distractors):
            rand = rng.integers(30, 226, 3).astype(np.float64)
            s = spec.distractor_similarity
            self.distractors.append(self._mover(rng, fw, fh, s * self.target.color + (1 - s) * rand, inner=False))

    def _mover(self, rng, fw, fh, color, inner: bool) -> _Mover:
        spec = self.spec
        w = rng.uniform(spec.min_size, spec.max_size)
        h = float(np.clip(w * np.exp(rng.uniform(-0.5, 0.5)), spec.min_size, spec.max_size))
        speed = rng.uniform(0, spec.max_speed)
        ang = rng.uniform(0, 2 * np.pi)
        x0 = rng.uniform(1, fw - 1 - w)
        y0 = rng.uniform(1, fh - 1 - h)
        inner_color = 255 - color if inner else None
        return _Mover(w, h, x0, y0, speed * np.cos(ang), speed * np.sin(ang), color, inner_color)

    def gt_box(self, t: int) -> tuple[float, float, float, float]:
        return self.target.box(t, self.spec.frame_width, self.spec.frame_height)

    def _background(self) -> np.ndarray:
        if self._bg_cache is None:
            fh, fw = self.spec.frame_height, self.spec.frame_width
            yy, xx = np.mgrid[0:fh, 0:fw]
            ramp = (np.cos(self.bg_angle) * xx / fw + np.sin(self.bg_angle) * yy / fh + 1) / 2
            bg = self.bg[0] * (1 - ramp[..., None]) + self.bg[1] * ramp[..., None]
            self._bg_cache = bg.astype(np.float32)
        return self._bg_cache.copy()

    def render(self, t: int) -> np.ndarray:
        spec = self.spec
        fh, fw = spec.frame_height, spec.frame_width
        img = self._background()
        for d in self.distractors:
            _paint(img, d.box(t, fw, fh), d.color)
        box = self.gt_box(t)
        _paint(img, box, self.target.color)
        x, y, w, h = box
        _paint(img, (x + w / 4, y + h / 4, w / 2, h / 2), self.target.inner)
        if spec.noise > 0:
            noise_rng = np.random.default_rng([spec.seed, t])
            img += noise_rng.standard_normal(img.shape, dtype=np.float32) * spec.noise
        return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _coverage(lo: float, hi: float, start: int, stop: int) -> np.ndarray:
    px = np.arange(start, stop)
    return np.clip(np.minimum(px + 1, hi) - np.maximum(px, lo), 0, 1)


def _paint(img: np.ndarray, box, color) -> None:
    """Composite a rectangle with exact fractional pixel coverage."""
    x, y, w, h = box
    r0, r1 = max(int(np.floor(y)), 0), min(int(np.ceil(y + h)), img.shape[0])
    c0, c1 = max(int(np.floor(x)), 0), min(int(np.ceil(x + w)), img.shape[1])
    if r1 <= r0 or c1 <= c0:
        return
    alpha = np.outer(_coverage(y, y + h, r0, r1), _coverage(x, x + w, c0, c1))[..., None]
    patch = img[r0:r1, c0:c1]
    patch *= 1 - alpha
    patch += alpha * np.asarray(color)


def synth_sequence(spec: SynthSpec, out_dir=None) -> tuple[list[np.ndarray], np.ndarray]:
    """Render a sequence; optionally write ``%06d.ppm`` frames and ``groundtruth.txt``."""
    scene = SynthScene(spec)
    frames = [scene.render(t) for t in range(spec.length)]
    gts = np.array([scene.gt_box(t) for t in range(spec.length)])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for t, f in enumerate(frames):
            write_pnm(out / f"{t + 1:06d}.ppm", f)
        write_boxes(out / "groundtruth.txt", gts)
    return frames, gts


def load_synth_spec(path) -> SynthSpec:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    parser.read_string(Path(path).read_text(encoding="utf-8"))
    if parser.sections() != ["synth"]:
        raise ValueError("synth spec must contain exactly one [synth] section")
    fields = {f.name: f for f in dataclasses.fields(SynthSpec)}
    values = {}
    for key, raw in parser["synth"].items():
        if key not in fields:
            raise ValueError(f"unknown synth key {key!r}")
        values[key] = float(raw) if fields[key].type == "float" else int(raw)
    return SynthSpec(**values)


# ---------------------------------------------------------------------------
# metrics


def _iou_xywh(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax1, ay1 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx1, by1 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.clip(np.minimum(ax1, bx1) - np.maximum(a[:, 0], b[:, 0]), 0, None)
    ih = np.clip(np.minimum(ay1, by1) - np.maximum(a[:, 1], b[:, 1]), 0, None)
    inter = iw * ih
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def evaluate_metrics(pred, gt) -> dict[str, float]:
    """Average overlap and success rates for (x, y, w, h) box lists."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predictions for {len(gt)} ground-truth boxes")
    if len(gt) == 0:
        raise ValueError("no boxes to evaluate")
    ious = _iou_xywh(pred, gt)
    return {"AO": float(ious.mean()),
            "SR@0.5": float((ious > 0.5).mean()),
            "SR@0.75": float((ious > 0.75).mean())}


# ---------------------------------------------------------------------------
# analytic MACs


@dataclass
class MacsReport:
    total: float
    encoder: float
    per_layer: list[tuple[int, int, float, float]]   # (n_pre, n_post, attn, mlp)
    search_counts: list[int]                          # after each elimination
    embed: float = 0.0
    head: float = 0.0


def macs_estimate(cfg: AttentionConfig, n_template: int, n_search: int,
                  keep_ratio: float | None = None, include_embed: bool = False,
                  include_head: bool = False, patch_size: int = 16,
                  head_layers: int = 4) -> MacsReport:
    """Closed-form multiply-accumulate count of the encoder.

    Full layer: 4·N·D² (Q, K, V, output projections) + 2·N²·D (scores and
    weighted values) + 2·r·N·D² (MLP with ratio r). In a layer that
    eliminates, attention runs on the pre-elimination N and the MLP on the
    post-elimination N.
    """
    rho = cfg.keep_ratio if keep_ratio is None else keep_ratio
    d = cfg.dim
    n = n_search
    per_layer, counts = [], []
    for layer in range(1, cfg.num_layers + 1):
        pre = n_template + n
        attn = 4 * pre * d * d + 2 * pre * pre * d
        if layer in cfg.elimination_layers:
            n = keep_count(rho, n)
            counts.append(n)
        post = n_template + n
        mlp = 2 * cfg.mlp_ratio * post * d * d
        per_layer.append((pre, post, float(attn), float(mlp)))
    encoder = sum(a + m for _, _, a, m in per_layer)
    embed = float((n_template + n_search) * 3 * patch_size ** 2 * d) if include_embed else 0.0
    head = 0.0
    if include_head:
        chans = [d] + [max(d // 2 ** i, 1) for i in range(head_layers)]
        convs = sum(9 * ci * co for ci, co in zip(chans[:-1], chans[1:]))
        finals = chans[-1] * (1 + 2 + 2)
        head = float(n_search * (3 * convs + finals))
    return MacsReport(encoder + embed + head, encoder, per_layer, counts, embed, head)
