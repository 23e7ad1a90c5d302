"""Early candidate elimination: rank search tokens by template attention, drop the weakest."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor_core as tc
from .embedder import TokenState


class ScoringStrategy(str, Enum):
    CENTER = "center"
    ALL = "all"
    GT_BOX = "gt_box"
    CENTER_4X4 = "center4x4"


@dataclass
class SimilarityScore:
    scores: np.ndarray  # (n,) or (B, n)

    @property
    def n(self) -> int:
        return self.scores.shape[-1]


def center_token_index(grid: tuple[int, int]) -> int:
    h, w = grid
    return w // 2 + w * (h // 2)


def template_rows(strategy, grid: tuple[int, int], box=None) -> np.ndarray:
    """Template token indices whose attention rows are summed for scoring.

    ``box`` is (cx, cy, w, h) normalised to the template crop; required for
    the ground-truth-box strategy. Tokens whose cell centre falls inside the
    box are used; if none does, the centre token stands in.
    """
    strategy = ScoringStrategy(strategy)
    h, w = grid
    if strategy is ScoringStrategy.CENTER:
        return np.array([center_token_index(grid)])
    if strategy is ScoringStrategy.ALL:
        return np.arange(h * w)
    if strategy is ScoringStrategy.CENTER_4X4:
        ys = range(max(h // 2 - 2, 0), min(h // 2 + 2, h))
        xs = range(max(w // 2 - 2, 0), min(w // 2 + 2, w))
        return np.array([x + w * y for y in ys for x in xs])
    if box is None:
        raise ValueError("gt_box scoring needs the template ground-truth box")
    cx, cy, bw, bh = (float(v) for v in box)
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w
    v = (yy + 0.5) / h
    inside = (np.abs(u - cx) <= bw / 2) & (np.abs(v - cy) <= bh / 2)
    rows = np.flatnonzero(inside.reshape(-1))
    return rows if rows.size else np.array([center_token_index(grid)])


def candidate_similarity(weights: np.ndarray, state: TokenState, strategy,
                         template_grid: tuple[int, int], template_box=None) -> SimilarityScore:
    """Head-averaged attention from the chosen template token(s) to each candidate.

    ``weights`` are the post-softmax attention maps of the current layer,
    (M, N, N) or (B, M, N, N). ``template_box`` is (4,) or (B, 4).
    """
    nz = state.n_template
    search_cols = weights[..., nz:]                     # (..., M, N, n)
    mean_heads = search_cols.mean(axis=-3)              # (..., N, n)
    if weights.ndim == 3:
        rows = template_rows(strategy, template_grid, template_box)
        return SimilarityScore(mean_heads[rows].sum(axis=0))
    out = np.empty((weights.shape[0], state.n_search), dtype=np.float64)
    for b in range(weights.shape[0]):
        box = None if template_box is None else np.asarray(template_box)[b]
        rows = template_rows(strategy, template_grid, box)
        out[b] = mean_heads[b, rows].sum(axis=0)
    return SimilarityScore(out)


def keep_count(rho: float, n: int) -> int:
    """k = ⌈ρ·n⌉, at least 1.

    The small slack keeps products such as 0.7·10 = 7.000000000000001 from
    rounding up past the exact value.
    """
    return max(1, math.ceil(rho * n - 1e-9))


def _top_positions(scores: np.ndarray, orig: np.ndarray, k: int) -> np.ndarray:
    # primary key: score descending; secondary: original index ascending
    order = np.lexsort((orig, -scores))
    return np.sort(order[:k])


def select_candidates(state: TokenState, scores: SimilarityScore, rho: float) -> TokenState:
    """Keep the ⌈ρ·n⌉ highest-scoring search tokens; template tokens untouched."""
    if not 0 < rho <= 1:
        raise ValueError("keep ratio must lie in (0, 1]")
    n = state.n_search
    if scores.n != n:
        raise ValueError(f"{scores.n} scores for {n} search tokens")
    k = keep_count(rho, n)
    if k == n:
        return state
    nz = state.n_template
    head = np.arange(nz)
    if state.batched:
        pos = np.stack([_top_positions(s, o, k) for s, o in zip(scores.scores, state.search_orig_index)])
        rows = np.concatenate([np.tile(head, (pos.shape[0], 1)), nz + pos], axis=1)
        new_index = np.take_along_axis(state.search_orig_index, pos, axis=1)
    else:
        pos = _top_positions(scores.scores, state.search_orig_index, k)
        rows = np.concatenate([head, nz + pos])
        new_index = state.search_orig_index[pos]
    return TokenState(tc.take_rows(state.tokens, rows), nz, new_index, state.n_search_full)


def search_tokens(state: TokenState) -> tc.Tensor:
    nz = state.n_template
    rows = np.arange(nz, nz + state.n_search)
    if state.batched:
        rows = np.tile(rows, (state.tokens.shape[0], 1))
    return tc.take_rows(state.tokens, rows)


def restore_order(state: TokenState) -> tc.Tensor:
    """Scatter surviving search tokens back to their grid slots; zeros elsewhere."""
    idx = state.search_orig_index
    for row in idx.reshape(-1, idx.shape[-1]):
        if np.unique(row).size != row.size:
            raise AssertionError("duplicate search indices: token state is corrupted")
    return tc.scatter_rows(search_tokens(state), idx, state.n_search_full)
