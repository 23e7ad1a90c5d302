"""Model and training configuration, plus the key/value file format.

Config files are INI-style UTF-8 text::

    [model]
    embed_dim = 64
    elimination_layers = 3, 5, 7

    [train]
    steps = 2000

Every key must be a known field; anything else is rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

STRATEGIES = ("center", "all", "gt_box", "center4x4")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    patch_size: int = 16
    embed_dim: int = 64
    num_heads: int = 4
    num_layers: int = 8
    mlp_ratio: int = 4
    template_size: int = 64
    search_size: int = 128
    elimination_layers: tuple[int, ...] = (3, 5, 7)
    keep_ratio: float = 0.7
    scoring_strategy: str = "center"
    joint_start_layer: int = 0
    head_layers: int = 4
    template_factor: float = 2.0
    search_factor: float = 4.0
    hanning: bool = True
    init_seed: int = 0

    def __post_init__(self):
        self.elimination_layers = tuple(sorted(int(i) for i in self.elimination_layers))
        self.validate()

    def validate(self) -> None:
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        for size in (self.template_size, self.search_size):
            if size % self.patch_size:
                raise ConfigError(f"image size {size} is not a multiple of patch size {self.patch_size}")
        if not 0 < self.keep_ratio <= 1:
            raise ConfigError("keep_ratio must lie in (0, 1]")
        if any(not 1 <= i <= self.num_layers for i in self.elimination_layers):
            raise ConfigError("elimination layers must lie in [1, num_layers]")
        if not 0 <= self.joint_start_layer <= self.num_layers:
            raise ConfigError("joint_start_layer must lie in [0, num_layers]")
        if self.scoring_strategy not in STRATEGIES:
            raise ConfigError(f"scoring_strategy must be one of {STRATEGIES}")
        if self.embed_dim % 8:
            raise ConfigError("embed_dim must be divisible by 8 (head channel halving)")

    @property
    def template_grid(self) -> tuple[int, int]:
        g = self.template_size // self.patch_size
        return g, g

    @property
    def search_grid(self) -> tuple[int, int]:
        g = self.search_size // self.patch_size
        return g, g

    @property
    def n_template(self) -> int:
        return (self.template_size // self.patch_size) ** 2

    @property
    def n_search(self) -> int:
        return (self.search_size // self.patch_size) ** 2

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr_backbone: float = 4e-5
    lr_other: float = 4e-4
    weight_decay: float = 1e-4
    lr_drop_fraction: float = 0.8
    warmup_steps: int = 0
    frame_size: int = 160
    max_gap: int = 8
    distractors: int = 2
    center_jitter: float = 3.0
    scale_jitter: float = 0.25
    seed: int = 0
    log_every: int = 100


PRESETS: dict[str, dict] = {
    "toy": {},
    "vitb256": dict(embed_dim=768, num_heads=12, num_layers=12, template_size=128,
                    search_size=256, elimination_layers=(4, 7, 10)),
    "vitb384": dict(embed_dim=768, num_heads=12, num_layers=12, template_size=192,
                    search_size=384, elimination_layers=(4, 7, 10), search_factor=5.0),
}

# training recipe used for the desk-scale model; the AdamW defaults in
# TrainConfig are the large-scale fine-tuning values and are far too small
# for training from random initialisation
TOY_TRAIN = dict(steps=4000, batch_size=24, lr_backbone=6e-4, lr_other=2e-3, warmup_steps=150)


def _coerce(f: dataclasses.Field, raw: str):
    raw = raw.strip()
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if kind.startswith("tuple"):
            return tuple(int(p) for p in raw.replace(",", " ").split())
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {f.name}: {raw!r}") from exc


def _section_to(cls, items: dict[str, str], base: dict | None = None):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values = dict(base or {})
    for key, raw in items.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in [{cls.__name__}]")
        values[key] = _coerce(fields[key], raw)
    return cls(**values)


def parse_config(text: str) -> tuple[ModelConfig, TrainConfig]:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    unknown = set(parser.sections()) - {"model", "train"}
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    preset = {}
    model_items = dict(parser["model"]) if parser.has_section("model") else {}
    if "preset" in model_items:
        name = model_items.pop("preset").strip()
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}")
        preset = PRESETS[name]
    model = _section_to(ModelConfig, model_items, preset)
    train = _section_to(TrainConfig, dict(parser["train"]) if parser.has_section("train") else {})
    return model, train


def load_config(source: str | Path) -> tuple[ModelConfig, TrainConfig]:
    """Load a config file, or a preset by name (``toy``, ``vitb256``, ``vitb384``)."""
    if str(source) in PRESETS:
        train = TrainConfig(**TOY_TRAIN) if source == "toy" else TrainConfig()
        return ModelConfig(**PRESETS[str(source)]), train
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"no such config file or preset: {source}")
    return parse_config(path.read_text(encoding="utf-8"))


def dump_config(model: ModelConfig, train: TrainConfig | None = None) -> str:
    lines = ["[model]"]
    for f in dataclasses.fields(model):
        v = getattr(model, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(i) for i in v)
        lines.append(f"{f.name} = {v}")
    if train is not None:
        lines += ["", "[train]"]
        lines += [f"{f.name} = {getattr(train, f.name)}" for f in dataclasses.fields(train)]
    return "\n".join(lines) + "\n"


def config_to_arrays(cfg: ModelConfig) -> dict[str, list[float]]:
    """Numeric encoding of a config so it can travel inside a weight file."""
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "scoring_strategy":
            v = [STRATEGIES.index(v)]
        elif isinstance(v, tuple):
            v = list(v)
        else:
            v = [float(v)]
        out[f"config/{f.name}"] = v
    return out


def config_from_arrays(arrays: dict) -> ModelConfig:
    values = {}
    for f in dataclasses.fields(ModelConfig):
        key = f"config/{f.name}"
        if key not in arrays:
            raise ConfigError(f"weight file lacks {key}")
        arr = [float(x) for x in list(arrays[key].reshape(-1))]
        if f.name == "scoring_strategy":
            values[f.name] = STRATEGIES[int(arr[0])]
        elif f.name == "elimination_layers":
            values[f.name] = tuple(int(x) for x in arr)
        elif f.name == "hanning":
            values[f.name] = bool(arr[0])
        elif f.type in ("int", int):
            values[f.name] = int(round(arr[0]))
        else:
            values[f.name] = arr[0]
    return ModelConfig(**values)
