"""Configuration tree for models, training and data.

Every section is a dataclass with a ``validate`` method.  The project file is
YAML with the sections ``backbones``, ``dense_aligner``, ``text_adapter``,
``head``, ``train``, ``data`` and ``eval``; unknown keys are rejected with
their full dotted path.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError


def default_branch_split(hidden_dim: int) -> tuple[int, int, int]:
    third = hidden_dim // 3
    return (hidden_dim - 2 * third, third, third)


@dataclass
class VisionBackboneConfig:
    num_layers: int = 6
    embed_dim: int = 64
    num_heads: int = 4
    patch_size: int = 4
    image_size: int = 64
    num_register_tokens: int = 2
    has_cls_token: bool = True
    mlp_ratio: float = 4.0

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def patch_token_offset(self) -> int:
        return int(self.has_cls_token) + self.num_register_tokens

    def validate(self, path="backbones.vision"):
        if self.num_layers < 1:
            raise ConfigError(f"{path}.num_layers must be >= 1")
        if self.image_size % self.patch_size:
            raise ConfigError(f"{path}.image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"{path}.embed_dim not divisible by num_heads")
        if self.num_register_tokens < 0:
            raise ConfigError(f"{path}.num_register_tokens must be >= 0")


@dataclass
class TextBackboneConfig:
    num_layers: int = 4
    embed_dim: int = 64
    num_heads: int = 4
    vocab_size: int = 64
    max_seq_len: int = 12
    pad_token_id: int = 0
    eos_token_id: int = 1
    mlp_ratio: float = 4.0
    # "projected": token features pass through the final text projection;
    # "hidden": token features are taken after the final layernorm only.
    feature_source: str = "projected"

    def validate(self, path="backbones.text"):
        if self.num_layers < 1:
            raise ConfigError(f"{path}.num_layers must be >= 1")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"{path}.embed_dim not divisible by num_heads")
        if not 0 <= self.eos_token_id < self.vocab_size:
            raise ConfigError(f"{path}.eos_token_id must be < vocab_size")
        if not 0 <= self.pad_token_id < self.vocab_size or self.pad_token_id == self.eos_token_id:
            raise ConfigError(f"{path}.pad_token_id must be a distinct id < vocab_size")
        if self.max_seq_len < 2:
            raise ConfigError(f"{path}.max_seq_len must be >= 2")
        if self.feature_source not in ("projected", "hidden"):
            raise ConfigError(f"{path}.feature_source must be 'projected' or 'hidden'")


@dataclass
class BackbonesConfig:
    vision: VisionBackboneConfig = field(default_factory=VisionBackboneConfig)
    text: TextBackboneConfig = field(default_factory=TextBackboneConfig)
    init_seed: int = 0

    def validate(self, path="backbones"):
        self.vision.validate(f"{path}.vision")
        self.text.validate(f"{path}.text")


def _check_adapter_common(cfg, path, num_layers=None):
    if cfg.hidden_dim < 3:
        raise ConfigError(f"{path}.hidden_dim must be >= 3")
    if tuple(cfg.kernel_sizes) != (1, 3, 5):
        raise ConfigError(f"{path}.kernel_sizes must be [1, 3, 5]")
    split = cfg.branches()
    if len(split) != 3 or any(c < 1 for c in split):
        raise ConfigError(f"{path}.branch_channels must be three positive counts")
    if sum(split) != cfg.hidden_dim:
        raise ConfigError(f"{path}.branch_channels sum {sum(split)} != hidden_dim {cfg.hidden_dim}")
    layers = list(cfg.placement_layers)
    if any(b <= a for a, b in zip(layers, layers[1:])):
        raise ConfigError(f"{path}.placement_layers must be strictly increasing")
    if layers and layers[0] < 1:
        raise ConfigError(f"{path}.placement_layers are 1-indexed")
    if num_layers is not None and layers and layers[-1] > num_layers:
        raise ConfigError(f"{path}.placement_layers exceed backbone depth {num_layers}")


@dataclass
class DenseAlignerConfig:
    hidden_dim: int = 32
    kernel_sizes: tuple = (1, 3, 5)
    branch_channels: tuple | None = None
    num_cross_heads: int = 4
    placement_layers: tuple = (1, 3, 5)
    query_norm: bool = True

    def branches(self) -> tuple[int, int, int]:
        if self.branch_channels is None:
            return default_branch_split(self.hidden_dim)
        return tuple(self.branch_channels)

    def validate(self, path="dense_aligner", num_layers=None):
        _check_adapter_common(self, path, num_layers)
        if self.hidden_dim % self.num_cross_heads:
            raise ConfigError(f"{path}.hidden_dim not divisible by num_cross_heads")


@dataclass
class TextAdapterConfig:
    hidden_dim: int = 16
    kernel_sizes: tuple = (1, 3, 5)
    branch_channels: tuple | None = None
    placement_layers: tuple = (1, 3)
    activation: bool = False

    def branches(self) -> tuple[int, int, int]:
        if self.branch_channels is None:
            return default_branch_split(self.hidden_dim)
        return tuple(self.branch_channels)

    def validate(self, path="text_adapter", num_layers=None):
        _check_adapter_common(self, path, num_layers)


@dataclass
class HeadConfig:
    neck_dim: int = 64
    num_heads: int = 4
    decoder_layers: int = 3
    mlp_ratio: float = 2.0
    pixel_dim: int = 32
    fusion: str = "sum"
    resize_mode: str = "bilinear"
    threshold: float = 0.5

    def validate(self, path="head"):
        if self.neck_dim % self.num_heads:
            raise ConfigError(f"{path}.neck_dim not divisible by num_heads")
        if self.fusion not in ("sum", "concat"):
            raise ConfigError(f"{path}.fusion must be 'sum' or 'concat'")
        if self.resize_mode not in ("bilinear", "nearest"):
            raise ConfigError(f"{path}.resize_mode must be 'bilinear' or 'nearest'")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"{path}.threshold must lie in (0, 1)")
        if self.decoder_layers < 1:
            raise ConfigError(f"{path}.decoder_layers must be >= 1")


@dataclass
class TrainConfig:
    epochs: int = 50
    base_lr: float = 1e-4
    decay_factor: float = 0.1
    decay_epoch: int = 35
    batch_size: int = 8
    seed: int = 0
    use_DA: bool = True
    use_TA: bool = True
    weight_decay: float = 0.0
    grad_clip: float | None = None
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    # "feature": loss on the 4x pixel-embedding grid with nearest-downsampled
    # targets; "input": logits resized to the input resolution.
    loss_resolution: str = "feature"
    log_every: int = 1

    def validate(self, path="train"):
        if self.epochs < 1:
            raise ConfigError(f"{path}.epochs must be >= 1")
        if not self.decay_epoch < self.epochs:
            raise ConfigError(f"{path}.decay_epoch must be < epochs")
        if self.base_lr <= 0:
            raise ConfigError(f"{path}.base_lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError(f"{path}.batch_size must be >= 1")
        if self.loss_resolution not in ("feature", "input"):
            raise ConfigError(f"{path}.loss_resolution must be 'feature' or 'input'")


@dataclass
class DataConfig:
    val_fraction: float = 0.0
    split_seed: int = 0

    def validate(self, path="data"):
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"{path}.val_fraction must lie in [0, 1)")


@dataclass
class EvalConfig:
    batch_size: int = 16
    threshold: float = 0.5

    def validate(self, path="eval"):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"{path}.threshold must lie in (0, 1)")
        if self.batch_size < 1:
            raise ConfigError(f"{path}.batch_size must be >= 1")


@dataclass
class ProjectConfig:
    backbones: BackbonesConfig = field(default_factory=BackbonesConfig)
    dense_aligner: DenseAlignerConfig = field(default_factory=DenseAlignerConfig)
    text_adapter: TextAdapterConfig = field(default_factory=TextAdapterConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ProjectConfig":
        self.backbones.validate()
        self.dense_aligner.validate(num_layers=self.backbones.vision.num_layers)
        self.text_adapter.validate(num_layers=self.backbones.text.num_layers)
        self.head.validate()
        self.train.validate()
        self.data.validate()
        self.eval.validate()
        return self

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "ProjectConfig":
        return _build(cls, data or {}, "").validate()

    def replace(self, **sections) -> "ProjectConfig":
        return dataclasses.replace(self, **sections)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        key_path = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(f"unknown config key: {key_path}")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, key_path)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def load_config(path: str | Path) -> ProjectConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return ProjectConfig.from_dict(data)


def save_config(cfg: ProjectConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


# Presets ---------------------------------------------------------------

def toy_config() -> ProjectConfig:
    """Desk-scale default used by tests and the CLI."""
    return ProjectConfig().validate()


def overfit_config(n_samples: int = 16) -> ProjectConfig:
    """Toy model with the memorisation recipe: one full batch per step, 300 steps,
    lr 5e-4 dropping at step 200."""
    cfg = toy_config()
    train = TrainConfig(epochs=300, base_lr=5e-4, decay_epoch=200, batch_size=n_samples)
    return cfg.replace(train=train).validate()


def dino_b_config(da_dim=128, ta_dim=64, da_layers=(1, 3, 5, 7, 9, 11),
                  ta_layers=(1, 3, 5, 7, 9, 11)) -> ProjectConfig:
    """ViT-B/14 vision (448 px, 4 registers) and a CLIP-width text encoder."""
    vision = VisionBackboneConfig(num_layers=12, embed_dim=768, num_heads=12, patch_size=14,
                                  image_size=448, num_register_tokens=4, has_cls_token=True)
    text = TextBackboneConfig(num_layers=12, embed_dim=512, num_heads=8, vocab_size=49408,
                              max_seq_len=77, pad_token_id=0, eos_token_id=49407)
    return ProjectConfig(
        backbones=BackbonesConfig(vision=vision, text=text),
        dense_aligner=DenseAlignerConfig(hidden_dim=da_dim, num_cross_heads=8,
                                         placement_layers=tuple(da_layers)),
        text_adapter=TextAdapterConfig(hidden_dim=ta_dim, placement_layers=tuple(ta_layers)),
        head=HeadConfig(neck_dim=256, num_heads=8, pixel_dim=256),
        train=TrainConfig(batch_size=32),
    ).validate()


PRESETS = {
    "toy": toy_config,
    "toy-overfit": overfit_config,
    "dino-b": dino_b_config,
    "dino-b-3": lambda: dino_b_config(da_layers=(1, 5, 9), ta_layers=(1, 5, 9)),
    "dino-b-dim64": lambda: dino_b_config(da_dim=64, ta_dim=64),
}

# Adapter budgets reported for the ViT-B presets (millions).
PRESET_TARGETS = {"dino-b": 2.71e6, "dino-b-3": 1.36e6, "dino-b-dim64": 1.93e6}
