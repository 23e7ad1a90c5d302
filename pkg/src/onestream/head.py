"""Fully convolutional centre/offset/size head and box decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor_core as tc
from .tensor_core import BatchNormState, Tensor

BRANCHES = ("score", "offset", "size")
OUT_CHANNELS = {"score": 1, "offset": 2, "size": 2}


class Frame(str, Enum):
    SEARCH_NORMALIZED = "search_normalized"
    FRAME_PIXELS = "frame_pixels"


@dataclass(frozen=True)
class BBox:
    """Centre-size box. ``frame`` says which coordinate system it lives in."""

    cx: float
    cy: float
    w: float
    h: float
    frame: Frame = Frame.SEARCH_NORMALIZED

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float,
                  frame: Frame = Frame.FRAME_PIXELS) -> "BBox":
        return cls(x + w / 2, y + h / 2, w, h, frame)

    def xywh(self) -> tuple[float, float, float, float]:
        return self.cx - self.w / 2, self.cy - self.h / 2, self.w, self.h

    def corners(self) -> tuple[float, float, float, float]:
        return self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass
class HeadMaps:
    """Sigmoid outputs: score (…, Gh, Gw), offset and size (…, 2, Gh, Gw)."""

    score: Tensor
    offset: Tensor
    size: Tensor

    @property
    def grid(self) -> tuple[int, int]:
        return self.score.shape[-2:]


@dataclass
class ConvStage:
    w: Tensor
    b: Tensor
    bn_g: Tensor
    bn_b: Tensor
    bn: BatchNormState


@dataclass
class HeadParams:
    branches: dict[str, list[ConvStage]]
    final: dict[str, tuple[Tensor, Tensor]]

    @staticmethod
    def channel_schedule(dim: int, layers: int = 4) -> list[int]:
        """D → D → D/2 → D/4 → D/8 for four stages."""
        return [dim] + [max(dim // 2 ** i, 1) for i in range(layers)]

    @classmethod
    def init(cls, dim: int, rng, layers: int = 4) -> "HeadParams":
        chans = cls.channel_schedule(dim, layers)
        branches, final = {}, {}
        for name in BRANCHES:
            stages = []
            for cin, cout in zip(chans[:-1], chans[1:]):
                std = math.sqrt(2.0 / (9 * cin))
                stages.append(ConvStage(
                    Tensor(rng.normal(0, std, (cout, cin, 3, 3)), requires_grad=True),
                    Tensor(np.zeros(cout), requires_grad=True),
                    Tensor(np.ones(cout), requires_grad=True),
                    Tensor(np.zeros(cout), requires_grad=True),
                    BatchNormState.fresh(cout),
                ))
            branches[name] = stages
            cin = chans[-1]
            # bias the score map towards background at start (focal-loss convention)
            b0 = -2.19 if name == "score" else 0.0
            final[name] = (Tensor(rng.normal(0, 0.01, (OUT_CHANNELS[name], cin)), requires_grad=True),
                           Tensor(np.full(OUT_CHANNELS[name], b0), requires_grad=True))
        return cls(branches, final)


def tokens_to_map(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    """(…, N, D) tokens in raster order → (…, D, Gh, Gw) feature map."""
    gh, gw = grid
    if tokens.shape[-2] != gh * gw:
        raise ValueError(f"{tokens.shape[-2]} tokens do not form a {gh}×{gw} grid")
    axes = (1, 0) if tokens.ndim == 2 else (0, 2, 1)
    t = tc.transpose(tokens, axes)
    return tc.reshape(t, t.shape[:-1] + (gh, gw))


def head_forward(restored: Tensor, params: HeadParams, grid: tuple[int, int] | None = None,
                 mode: str = "eval") -> HeadMaps:
    n = restored.shape[-2]
    if grid is None:
        g = math.isqrt(n)
        if g * g != n:
            raise ValueError(f"{n} tokens are not a square grid")
        grid = (g, g)
    fmap = tokens_to_map(restored, grid)
    outs = {}
    for name in BRANCHES:
        x = fmap
        for st in params.branches[name]:
            x = tc.relu(tc.batch_norm(tc.conv2d(x, st.w, st.b), st.bn_g, st.bn_b, st.bn, mode))
        w, b = params.final[name]
        outs[name] = tc.sigmoid(tc.conv1x1(x, w, b))
    score = outs["score"]
    score = tc.reshape(score, score.shape[:-3] + score.shape[-2:])
    return HeadMaps(score, outs["offset"], outs["size"])


def decode_box(score: np.ndarray, offset: np.ndarray, size: np.ndarray) -> BBox:
    """Box at the highest-scoring cell (first in row-major order on ties).

    Inputs are one sample: score (Gh, Gw), offset/size (2, Gh, Gw).
    """
    gh, gw = score.shape
    flat = int(np.argmax(score))
    yd, xd = divmod(flat, gw)
    cx = (xd + float(offset[0, yd, xd])) / gw
    cy = (yd + float(offset[1, yd, xd])) / gh
    return BBox(cx, cy, float(size[0, yd, xd]), float(size[1, yd, xd]), Frame.SEARCH_NORMALIZED)


def decode_maps(maps: HeadMaps, index: int | None = None) -> BBox:
    s, o, z = maps.score.data, maps.offset.data, maps.size.data
    if index is not None:
        s, o, z = s[index], o[index], z[index]
    return decode_box(s, o, z)
