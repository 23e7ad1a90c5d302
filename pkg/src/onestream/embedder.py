"""Patch embedding of a template/search pair into one token sequence."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .tensor_core import Tensor


@dataclass
class ImagePatchGrid:
    """A 3×H×W (or B×3×H×W) image in [-1, 1] cut into P×P patches."""

    role: str
    pixels: np.ndarray
    patch_size: int

    def __post_init__(self):
        if self.role not in ("template", "search"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.pixels.ndim not in (3, 4) or self.pixels.shape[-3] != 3:
            raise ValueError(f"expected 3×H×W pixels, got {self.pixels.shape}")
        h, w = self.pixels.shape[-2:]
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"{h}×{w} image is not divisible into {self.patch_size}-pixel patches")

    @property
    def grid(self) -> tuple[int, int]:
        h, w = self.pixels.shape[-2:]
        return h // self.patch_size, w // self.patch_size

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw


@dataclass
class EmbedderParams:
    proj: Tensor          # (3·P²) × D
    pos_template: Tensor  # N_z × D
    pos_search: Tensor    # N_x × D
    template_grid: tuple[int, int]
    search_grid: tuple[int, int]

    @classmethod
    def init(cls, patch_size: int, dim: int, template_grid, search_grid, rng) -> "EmbedderParams":
        fan_in = 3 * patch_size ** 2
        proj = rng.normal(0, 1 / math.sqrt(fan_in), (fan_in, dim))
        nz = template_grid[0] * template_grid[1]
        nx = search_grid[0] * search_grid[1]
        return cls(
            Tensor(proj, requires_grad=True),
            Tensor(rng.normal(0, 0.02, (nz, dim)), requires_grad=True),
            Tensor(rng.normal(0, 0.02, (nx, dim)), requires_grad=True),
            tuple(template_grid),
            tuple(search_grid),
        )


@dataclass
class TokenState:
    """Concatenated template+search tokens and the search-token bookkeeping.

    ``tokens`` is (N, D) or (B, N, D) with the ``n_template`` template rows
    first. ``search_orig_index`` holds, for each surviving search token, its
    position in the original search grid; it stays sorted ascending.
    """

    tokens: Tensor
    n_template: int
    search_orig_index: np.ndarray
    n_search_full: int

    @property
    def n_search(self) -> int:
        return self.tokens.shape[-2] - self.n_template

    @property
    def batched(self) -> bool:
        return self.tokens.ndim == 3

    def check(self) -> None:
        idx = self.search_orig_index
        if idx.shape[-1] != self.n_search:
            raise AssertionError("search_orig_index length differs from search token count")
        rows = idx.reshape(-1, idx.shape[-1])
        for row in rows:
            if row.size and (row.min() < 0 or row.max() >= self.n_search_full):
                raise AssertionError("search index out of range")
            if np.any(np.diff(row) <= 0):
                raise AssertionError("search indices must be unique and ascending")


def patchify(img: ImagePatchGrid) -> Tensor:
    """Cut into patches; row ``col + row·(W/P)`` is that patch flattened as P×P×3."""
    x = img.pixels
    p = img.patch_size
    gh, gw = img.grid
    lead = x.shape[:-3]
    x = x.reshape(lead + (3, gh, p, gw, p))
    nd = len(lead)
    # -> lead, gh, gw, p, p, 3
    axes = tuple(range(nd)) + tuple(nd + a for a in (1, 3, 2, 4, 0))
    patches = np.transpose(x, axes).reshape(lead + (gh * gw, 3 * p * p))
    return Tensor(patches)


def unpatchify(patches: np.ndarray, grid: tuple[int, int], patch_size: int) -> np.ndarray:
    gh, gw = grid
    p = patch_size
    lead = patches.shape[:-2]
    nd = len(lead)
    x = patches.reshape(lead + (gh, gw, p, p, 3))
    axes = tuple(range(nd)) + tuple(nd + a for a in (4, 0, 2, 1, 3))
    return np.transpose(x, axes).reshape(lead + (3, gh * p, gw * p))


def _cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    near = ((a + 2) * t - (a + 3)) * t * t + 1
    far = ((a * t - 5 * a) * t + 8 * a) * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def cubic_resample_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """n_dst × n_src matrix of 1-D cubic-convolution weights.

    Grid end points are aligned (sample i sits at i·(n_src−1)/(n_dst−1)).
    Samples beyond the ends are extrapolated with f(−1) = 3f(0) − 3f(1) + f(2)
    (linear extrapolation when n_src < 3), so polynomials up to degree one
    are reproduced exactly, boundaries included.
    """
    if n_src == n_dst:
        return np.eye(n_src)
    if n_src == 1:
        return np.ones((n_dst, 1))
    pos = np.linspace(0, n_src - 1, n_dst) if n_dst > 1 else np.array([(n_src - 1) / 2])
    # rows of `ext` express virtual samples -1 .. n_src in terms of real samples
    ext = np.zeros((n_src + 2, n_src))
    ext[1:-1] = np.eye(n_src)
    if n_src >= 3:
        ext[0, :3] = (3, -3, 1)
        ext[-1, -3:] = (1, -3, 3)
    else:
        ext[0, :2] = (2, -1)
        ext[-1, -2:] = (-1, 2)
    m = np.zeros((n_dst, n_src))
    for i, s in enumerate(pos):
        base = int(np.floor(s))
        for k in range(base - 1, base + 3):
            kk = min(max(k, -1), n_src)
            m[i] += _cubic(np.array(s - k)) * ext[kk + 1]
    return m


def interpolate_pos_embed(table, src_grid: tuple[int, int], dst_grid: tuple[int, int]) -> Tensor:
    """Bicubically resample an N₁×D positional table from one grid to another.

    Each channel is treated as an h₁×w₁ image. The resampling is a fixed
    linear map, so gradients flow back to ``table``.
    """
    table = tc.as_tensor(table)
    h1, w1 = src_grid
    h2, w2 = dst_grid
    if h1 * w1 != table.shape[0]:
        raise ValueError(f"table has {table.shape[0]} rows, grid {h1}×{w1} needs {h1 * w1}")
    if (h1, w1) == (h2, w2):
        return table
    kron = np.kron(cubic_resample_matrix(h1, h2), cubic_resample_matrix(w1, w2))
    return tc.matmul(Tensor(kron), table)


def _fit_table(table: Tensor, grid_of_table, grid, allow_interpolation: bool) -> Tensor:
    if table.shape[0] == grid[0] * grid[1] and tuple(grid_of_table) == tuple(grid):
        return table
    if not allow_interpolation:
        raise ValueError(f"positional table for {grid_of_table} does not fit grid {grid}")
    return interpolate_pos_embed(table, grid_of_table, grid)


def embed_pair(z: ImagePatchGrid, x: ImagePatchGrid, params: EmbedderParams,
               allow_interpolation: bool = True) -> TokenState:
    """Project both images to D-dim tokens, add positions, concatenate template-first."""
    if z.patch_size != x.patch_size or params.proj.shape[0] != 3 * z.patch_size ** 2:
        raise ValueError("patch size does not match the projection matrix")
    pos_z = _fit_table(params.pos_template, params.template_grid, z.grid, allow_interpolation)
    pos_x = _fit_table(params.pos_search, params.search_grid, x.grid, allow_interpolation)
    hz = tc.add(tc.linear(patchify(z), params.proj), pos_z)
    hx = tc.add(tc.linear(patchify(x), params.proj), pos_x)
    tokens = tc.concat([hz, hx], axis=-2)
    n_x = x.num_tokens
    index = np.arange(n_x)
    if tokens.ndim == 3:
        index = np.tile(index, (tokens.shape[0], 1))
    return TokenState(tokens, z.num_tokens, index, n_x)
