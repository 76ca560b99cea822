"""Full referring-segmentation model: frozen encoders, adapters and head."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ProjectConfig
from .dense_aligner import DenseAlignerStack
from .encoders import TextBackbone, TextFeatures, VisionBackbone, VisionFeatureMap, freeze_backbones
from .errors import ConfigError
from .ris_head import MaskPrediction, PixelTextPair, RISHead, predict_mask
from .text_adapter import TextAdapterStack
from .utils import seeded


@dataclass
class ModelOutput:
    pair: PixelTextPair
    text: TextFeatures
    taps: list[VisionFeatureMap]
    final: VisionFeatureMap

    @property
    def logits(self) -> torch.Tensor:
        return self.pair.logits()


class RISModel(nn.Module):
    def __init__(self, cfg: ProjectConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        v, t = cfg.backbones.vision, cfg.backbones.text
        seed = cfg.backbones.init_seed
        with seeded(seed, "vision_backbone"):
            self.vision = VisionBackbone(v)
        with seeded(seed, "text_backbone"):
            self.text = TextBackbone(t)
        self.dense_aligners = None
        self.text_adapters = None
        if cfg.train.use_DA and cfg.dense_aligner.placement_layers:
            self.dense_aligners = DenseAlignerStack(cfg.dense_aligner, v.embed_dim, t.embed_dim,
                                                    v.grid_size, v.grid_size, v.patch_token_offset, seed)
        if cfg.train.use_TA and cfg.text_adapter.placement_layers:
            self.text_adapters = TextAdapterStack(cfg.text_adapter, t.embed_dim, seed)
        with seeded(seed, "head"):
            self.head = RISHead(cfg.head, v.embed_dim, t.embed_dim, v.grid_size, v.grid_size)
        freeze_backbones(self)

    def train(self, mode: bool = True):
        super().train(mode)
        # backbones stay in inference mode whatever the trainer asks
        self.vision.eval()
        self.text.eval()
        return self

    def encode_text(self, token_ids) -> TextFeatures:
        hooks = self.text_adapters.hooks() if self.text_adapters is not None else None
        return self.text(token_ids, hooks)

    def encode_image(self, image, text: TextFeatures):
        hooks = self.dense_aligners.hooks(text) if self.dense_aligners is not None else None
        return self.vision(image, hooks)

    def forward(self, image, token_ids) -> ModelOutput:
        text = self.encode_text(token_ids)
        taps, final = self.encode_image(image, text)
        pair = self.head(taps, text)
        return ModelOutput(pair, text, taps, final)

    @torch.no_grad()
    def predict(self, image, token_ids, threshold=None, out_size=None) -> MaskPrediction:
        threshold = self.cfg.head.threshold if threshold is None else threshold
        out_size = tuple(image.shape[-2:]) if out_size is None else tuple(out_size)
        out = self(image, token_ids)
        return predict_mask(out.pair, out_size, threshold, self.cfg.head.resize_mode)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def named_trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]


def build_model(cfg: ProjectConfig, device=None, dtype=None) -> RISModel:
    model = RISModel(cfg)
    if device is not None or dtype is not None:
        model = model.to(device=device, dtype=dtype)
    return model


def ablate(cfg: ProjectConfig, use_DA: bool, use_TA: bool) -> ProjectConfig:
    """Config variant with adapter stacks removed (not zeroed)."""
    import dataclasses

    train = dataclasses.replace(cfg.train, use_DA=use_DA, use_TA=use_TA)
    return cfg.replace(train=train).validate()


ABLATION_MATRIX = {(False, False): "baseline", (True, False): "da-only",
                   (False, True): "ta-only", (True, True): "full"}


def loss_targets(logits: torch.Tensor, masks: torch.Tensor, resolution: str):
    """Match logits and ground truth for the loss.

    ``feature``: ground truth downsampled (nearest) to the logit grid.
    ``input``: logits resized (bilinear) to the ground-truth resolution.
    """
    if resolution == "feature":
        if masks.shape[-2:] != logits.shape[-2:]:
            masks = F.interpolate(masks[:, None].float(), size=logits.shape[-2:], mode="nearest")[:, 0]
        return logits, masks.to(logits.dtype)
    if resolution == "input":
        if masks.shape[-2:] != logits.shape[-2:]:
            logits = F.interpolate(logits[:, None], size=masks.shape[-2:], mode="bilinear",
                                   align_corners=False)[:, 0]
        return logits, masks.to(logits.dtype)
    raise ConfigError(f"unknown loss resolution {resolution!r}")
