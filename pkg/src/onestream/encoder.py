"""Pre-norm transformer encoder over the joint template+search sequence."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import elimination as elim
from . import tensor_core as tc
from .embedder import TokenState
from .tensor_core import Tensor


@dataclass
class AttentionConfig:
    dim: int
    num_heads: int
    num_layers: int
    elimination_layers: tuple[int, ...] = ()
    keep_ratio: float = 1.0
    joint_start_layer: int = 0
    mlp_ratio: int = 4
    strategy: str = "center"
    template_grid: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.dim % self.num_heads:
            raise ValueError("dim must be divisible by num_heads")
        if any(not 1 <= i <= self.num_layers for i in self.elimination_layers):
            raise ValueError("elimination layers must lie in [1, num_layers]")
        if not 0 < self.keep_ratio <= 1:
            raise ValueError("keep ratio must lie in (0, 1]")
        if not 0 <= self.joint_start_layer <= self.num_layers:
            raise ValueError("joint_start_layer must lie in [0, num_layers]")

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads


@dataclass
class AttentionRecord:
    """Post-softmax weights of one layer: (M, N, N) or (B, M, N, N).

    ``search_orig_index`` is the search bookkeeping the weights were computed
    under, so the search columns can be placed back on the full grid.
    """

    weights: np.ndarray
    layer: int
    n_template: int
    search_orig_index: np.ndarray


@dataclass
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    @classmethod
    def init(cls, dim: int, mlp_ratio: int, rng) -> "LayerParams":
        def w(i, o):
            return Tensor(rng.normal(0, 0.02, (i, o)), requires_grad=True)

        def const(n, v):
            return Tensor(np.full(n, v), requires_grad=True)

        hid = dim * mlp_ratio
        return cls(const(dim, 1.0), const(dim, 0.0),
                   w(dim, dim), const(dim, 0.0), w(dim, dim), const(dim, 0.0),
                   w(dim, dim), const(dim, 0.0), w(dim, dim), const(dim, 0.0),
                   const(dim, 1.0), const(dim, 0.0),
                   w(dim, hid), const(hid, 0.0), w(hid, dim), const(dim, 0.0))

    def named(self) -> dict[str, Tensor]:
        return dict(vars(self))


@dataclass
class BackboneParams:
    layers: list[LayerParams]
    norm_g: Tensor
    norm_b: Tensor


def block_mask(n_template: int, n_total: int) -> np.ndarray:
    """True where attention crosses the template/search boundary."""
    is_t = np.arange(n_total) < n_template
    return is_t[:, None] != is_t[None, :]


def _split_heads(x: Tensor, b: int, n: int, m: int, dk: int) -> Tensor:
    return tc.transpose(tc.reshape(x, (b, n, m, dk)), (0, 2, 1, 3))


def multi_head_attention(tokens: Tensor, p: LayerParams, num_heads: int,
                         mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Softmax(QKᵀ/√d_k)·V per head, heads concatenated and projected.

    Returns the output (same shape as ``tokens``) and the attention weights,
    (M, N, N) for unbatched input or (B, M, N, N).
    """
    single = tokens.ndim == 2
    x = tc.reshape(tokens, (1,) + tokens.shape) if single else tokens
    b, n, d = x.shape
    if d != p.wq.shape[0]:
        raise ValueError(f"token dim {d} does not match attention params {p.wq.shape[0]}")
    dk = d // num_heads
    q = _split_heads(tc.linear(x, p.wq, p.bq), b, n, num_heads, dk)
    k = _split_heads(tc.linear(x, p.wk, p.bk), b, n, num_heads, dk)
    v = _split_heads(tc.linear(x, p.wv, p.bv), b, n, num_heads, dk)
    scores = tc.mul(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    attn = tc.softmax(scores, axis=-1, mask=mask)
    ctx = tc.reshape(tc.transpose(tc.matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
    out = tc.linear(ctx, p.wo, p.bo)
    if single:
        return tc.reshape(out, tokens.shape), attn.data[0]
    return out, attn.data


def encoder_layer_forward(state: TokenState, p: LayerParams, cfg: AttentionConfig,
                          layer: int, template_box=None) -> tuple[TokenState, AttentionRecord]:
    """One pre-norm layer, 1-based ``layer``.

    Candidate elimination, when scheduled for this layer, runs between the
    attention residual and the MLP, so the MLP already sees fewer tokens.
    Layers up to ``joint_start_layer`` use the template/search block mask.
    """
    x = state.tokens
    n_total = x.shape[-2]
    mask = block_mask(state.n_template, n_total) if layer <= cfg.joint_start_layer else None
    attn_out, weights = multi_head_attention(tc.layer_norm(x, p.ln1_g, p.ln1_b), p, cfg.num_heads, mask)
    record = AttentionRecord(weights, layer, state.n_template, state.search_orig_index)
    state = TokenState(tc.add(x, attn_out), state.n_template, state.search_orig_index,
                       state.n_search_full)
    if layer in cfg.elimination_layers:
        scores = elim.candidate_similarity(weights, state, cfg.strategy, cfg.template_grid, template_box)
        state = elim.select_candidates(state, scores, cfg.keep_ratio)
    x = state.tokens
    h = tc.gelu(tc.linear(tc.layer_norm(x, p.ln2_g, p.ln2_b), p.fc1_w, p.fc1_b))
    x = tc.add(x, tc.linear(h, p.fc2_w, p.fc2_b))
    return TokenState(x, state.n_template, state.search_orig_index, state.n_search_full), record


def backbone_forward(state: TokenState, params: BackboneParams, cfg: AttentionConfig,
                     template_box=None) -> tuple[TokenState, list[AttentionRecord]]:
    """All layers in order, then the final layer norm."""
    if len(params.layers) != cfg.num_layers:
        raise ValueError(f"{len(params.layers)} layer params for a {cfg.num_layers}-layer config")
    records = []
    for i, lp in enumerate(params.layers, start=1):
        state, rec = encoder_layer_forward(state, lp, cfg, i, template_box)
        records.append(rec)
    out = tc.layer_norm(state.tokens, params.norm_g, params.norm_b)
    return TokenState(out, state.n_template, state.search_orig_index, state.n_search_full), records
