"""The full tracking network: embedder → joint encoder → restoration → head."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import elimination as elim
from . import tensor_core as tc
from .config import ModelConfig, config_from_arrays, config_to_arrays
from .embedder import EmbedderParams, ImagePatchGrid, TokenState, embed_pair
from .encoder import AttentionConfig, AttentionRecord, BackboneParams, LayerParams, backbone_forward
from .head import HeadMaps, HeadParams, head_forward
from .tensor_core import BatchNormState, Tensor


@dataclass
class ForwardResult:
    maps: HeadMaps
    state: TokenState
    records: list[AttentionRecord]


class TrackerNet:
    """Parameters plus forward pass for one :class:`ModelConfig`."""

    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
        self.embedder = EmbedderParams.init(cfg.patch_size, cfg.embed_dim, cfg.template_grid,
                                            cfg.search_grid, rng)
        layers = [LayerParams.init(cfg.embed_dim, cfg.mlp_ratio, rng) for _ in range(cfg.num_layers)]
        self.backbone = BackboneParams(layers, Tensor(np.ones(cfg.embed_dim), requires_grad=True),
                                       Tensor(np.zeros(cfg.embed_dim), requires_grad=True))
        self.head = HeadParams.init(cfg.embed_dim, rng, cfg.head_layers)

    def attention_config(self) -> AttentionConfig:
        return self.attention_config_for(self.cfg)

    @staticmethod
    def attention_config_for(c: ModelConfig) -> AttentionConfig:
        return AttentionConfig(c.embed_dim, c.num_heads, c.num_layers, c.elimination_layers,
                               c.keep_ratio, c.joint_start_layer, c.mlp_ratio,
                               c.scoring_strategy, c.template_grid)

    # -- parameter bookkeeping -------------------------------------------------

    def backbone_params(self) -> dict[str, Tensor]:
        out = {"embed.proj": self.embedder.proj,
               "embed.pos_template": self.embedder.pos_template,
               "embed.pos_search": self.embedder.pos_search}
        for i, lp in enumerate(self.backbone.layers):
            for k, v in lp.named().items():
                out[f"encoder.{i}.{k}"] = v
        out["encoder.norm_g"] = self.backbone.norm_g
        out["encoder.norm_b"] = self.backbone.norm_b
        return out

    def head_params(self) -> dict[str, Tensor]:
        out = {}
        for name, stages in self.head.branches.items():
            for i, st in enumerate(stages):
                for k in ("w", "b", "bn_g", "bn_b"):
                    out[f"head.{name}.{i}.{k}"] = getattr(st, k)
            w, b = self.head.final[name]
            out[f"head.{name}.final.w"] = w
            out[f"head.{name}.final.b"] = b
        return out

    def parameters(self) -> dict[str, Tensor]:
        return {**self.backbone_params(), **self.head_params()}

    def bn_states(self) -> dict[str, BatchNormState]:
        return {f"head.{name}.{i}.bn": st.bn
                for name, stages in self.head.branches.items() for i, st in enumerate(stages)}

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {k: v.data for k, v in self.parameters().items()}
        for k, st in self.bn_states().items():
            arrays[f"{k}.running_mean"] = st.running_mean
            arrays[f"{k}.running_var"] = st.running_var
        for k, v in config_to_arrays(self.cfg).items():
            arrays[k] = np.asarray(v, dtype=np.float32)
        return arrays

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = [k for k in params if k not in arrays]
        if missing:
            raise KeyError(f"weights lack {missing[:3]}…")
        for k, p in params.items():
            if arrays[k].shape != p.shape:
                raise ValueError(f"{k}: stored shape {arrays[k].shape} != model shape {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float32)
        for k, st in self.bn_states().items():
            st.running_mean = np.array(arrays[f"{k}.running_mean"], dtype=np.float32)
            st.running_var = np.array(arrays[f"{k}.running_var"], dtype=np.float32)

    def save(self, path) -> None:
        tc.save_weights(path, self.state_arrays())

    @classmethod
    def load(cls, path, cfg: ModelConfig | None = None) -> "TrackerNet":
        arrays = tc.load_weights(Path(path))
        net = cls(cfg or config_from_arrays(arrays))
        net.load_arrays(arrays)
        return net

    # -- forward ---------------------------------------------------------------

    def forward(self, template: np.ndarray, search: np.ndarray, template_box=None,
                mode: str = "eval", cfg_override: AttentionConfig | None = None) -> ForwardResult:
        """Run the network on pixel arrays in [-1, 1], 3×H×W or B×3×H×W."""
        c = self.cfg
        z = ImagePatchGrid("template", template, c.patch_size)
        x = ImagePatchGrid("search", search, c.patch_size)
        state = embed_pair(z, x, self.embedder)
        attn_cfg = cfg_override or self.attention_config()
        state, records = backbone_forward(state, self.backbone, attn_cfg, template_box)
        restored = elim.restore_order(state)
        maps = head_forward(restored, self.head, c.search_grid, mode)
        return ForwardResult(maps, state, records)

    def encoder_macs_ratio(self) -> float:
        from .bench import macs_estimate
        full = macs_estimate(self.attention_config(), self.cfg.n_template, self.cfg.n_search,
                             keep_ratio=1.0).total
        pruned = macs_estimate(self.attention_config(), self.cfg.n_template, self.cfg.n_search).total
        return pruned / full
