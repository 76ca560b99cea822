"""Segmentation head: cross-modal neck, vision-language decoder and an
upsampling projector whose final 1x1 convolution is generated per sample
from the sentence feature."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import HeadConfig
from .encoders import TextFeatures, VisionFeatureMap
from .errors import ConfigError, GeometryError


def coord_feature(h: int, w: int, batch: int = 1, dtype=torch.float32, device=None) -> torch.Tensor:
    """[B, 2, h, w] with channel 0 = x, channel 1 = y, both spanning [-1, 1]."""
    ys = torch.linspace(-1, 1, h, dtype=dtype, device=device)
    xs = torch.linspace(-1, 1, w, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy])[None].expand(batch, -1, -1, -1)


def _groups(c):
    return math.gcd(8, c)


@dataclass
class PixelTextPair:
    F_c: torch.Tensor  # [B, D, 4h, 4w]
    F_l: torch.Tensor  # [B, D + 1]

    @property
    def weight(self):
        return self.F_l[:, :-1]

    @property
    def bias(self):
        return self.F_l[:, -1]

    def logits(self) -> torch.Tensor:
        """Per-pixel dynamic 1x1 convolution, [B, 4h, 4w]."""
        return torch.einsum("bdhw,bd->bhw", self.F_c, self.weight) + self.bias[:, None, None]


@dataclass
class MaskPrediction:
    logits: torch.Tensor  # [B, 1, H, W]
    mask: torch.Tensor  # [B, 1, H, W] bool
    image_size: tuple


class Neck(nn.Module):
    def __init__(self, cfg: HeadConfig, vision_dim: int, text_dim: int):
        super().__init__()
        c = cfg.neck_dim
        self.cfg = cfg
        self.tap_proj = nn.ModuleList(nn.Sequential(nn.LayerNorm(vision_dim), nn.Linear(vision_dim, c))
                                      for _ in range(3))
        self.scale_fuse = nn.Linear(3 * c, c) if cfg.fusion == "concat" else None
        self.query_norm = nn.LayerNorm(c)
        self.cross_attn = nn.MultiheadAttention(c, cfg.num_heads, kdim=text_dim, vdim=text_dim, batch_first=True)
        self.fuse_conv = nn.Sequential(nn.Conv2d(c + 2, c, 3, padding=1), nn.GroupNorm(_groups(c), c), nn.ReLU())

    def forward(self, taps: list[VisionFeatureMap], text: TextFeatures) -> torch.Tensor:
        if len(taps) != 3:
            raise GeometryError("neck expects three tapped feature maps")
        gh, gw = taps[0].grid_h, taps[0].grid_w
        if any((t.grid_h, t.grid_w) != (gh, gw) for t in taps):
            raise GeometryError("tapped feature maps have different grids")
        projected = [proj(t.patch_tokens) for proj, t in zip(self.tap_proj, taps)]
        if self.scale_fuse is None:
            x = projected[0] + projected[1] + projected[2]
        else:
            x = self.scale_fuse(torch.cat(projected, -1))
        t = text.token_features
        attended, _ = self.cross_attn(self.query_norm(x), t, t, key_padding_mask=text.key_padding_mask,
                                      need_weights=False)
        F_f = x + attended
        b, n, c = F_f.shape
        grid = F_f.transpose(1, 2).reshape(b, c, gh, gw)
        coords = coord_feature(gh, gw, b, F_f.dtype, F_f.device)
        return self.fuse_conv(torch.cat([grid, coords], 1))


class DecoderLayer(nn.Module):
    def __init__(self, dim, num_heads, text_dim, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiheadAttention(dim, num_heads, kdim=text_dim, vdim=text_dim, batch_first=True)
        self.norm3 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, pos, text: TextFeatures, need_weights=False):
        q = self.norm1(x)
        x = x + self.self_attn(q + pos, q + pos, q, need_weights=False)[0]
        q = self.norm2(x)
        t = text.token_features
        attended, weights = self.cross_attn(q + pos, t, t, key_padding_mask=text.key_padding_mask,
                                            need_weights=need_weights, average_attn_weights=False)
        x = x + attended
        x = x + self.mlp(self.norm3(x))
        return (x, weights) if need_weights else x

    def output_projections(self):
        return [self.self_attn.out_proj, self.cross_attn.out_proj, self.mlp[-1]]


class Decoder(nn.Module):
    def __init__(self, cfg: HeadConfig, text_dim: int, num_tokens: int):
        super().__init__()
        self.pos_embed = nn.Parameter(torch.zeros(1, num_tokens, cfg.neck_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.layers = nn.ModuleList(DecoderLayer(cfg.neck_dim, cfg.num_heads, text_dim, cfg.mlp_ratio)
                                    for _ in range(cfg.decoder_layers))

    def forward(self, f_c: torch.Tensor, text: TextFeatures) -> torch.Tensor:
        x = f_c.flatten(2).transpose(1, 2)
        if x.shape[1] != self.pos_embed.shape[1]:
            raise GeometryError(f"decoder built for {self.pos_embed.shape[1]} tokens, got {x.shape[1]}")
        for layer in self.layers:
            x = layer(x, self.pos_embed, text)
        return x


class Projector(nn.Module):
    def __init__(self, cfg: HeadConfig, text_dim: int):
        super().__init__()
        c, d = cfg.neck_dim, cfg.pixel_dim
        half = max(c // 2, 1)
        self.vis = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(c, c, 3, padding=1), nn.GroupNorm(_groups(c), c), nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(c, half, 3, padding=1), nn.GroupNorm(_groups(half), half), nn.ReLU(),
            nn.Conv2d(half, d, 1),
        )
        self.txt = nn.Linear(text_dim, d + 1)

    def forward(self, F_mm, f_s, grid_hw) -> PixelTextPair:
        b, n, c = F_mm.shape
        gh, gw = grid_hw
        F_c = self.vis(F_mm.transpose(1, 2).reshape(b, c, gh, gw))
        return PixelTextPair(F_c, self.txt(f_s))


class RISHead(nn.Module):
    def __init__(self, cfg: HeadConfig, vision_dim: int, text_dim: int, grid_h: int, grid_w: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.grid = (grid_h, grid_w)
        self.neck = Neck(cfg, vision_dim, text_dim)
        self.decoder = Decoder(cfg, text_dim, grid_h * grid_w)
        self.projector = Projector(cfg, text_dim)

    def forward(self, taps, text: TextFeatures) -> PixelTextPair:
        f_c = self.neck(taps, text)
        F_mm = self.decoder(f_c, text)
        return self.projector(F_mm, text.sentence_feature, self.grid)


def predict_mask(pair: PixelTextPair, out_size, threshold=0.5, mode="bilinear") -> MaskPrediction:
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    logits = pair.logits()[:, None]
    if tuple(logits.shape[-2:]) != tuple(out_size):
        kwargs = {"align_corners": False} if mode == "bilinear" else {}
        logits = F.interpolate(logits, size=tuple(out_size), mode=mode, **kwargs)
    mask = torch.sigmoid(logits) > threshold
    return MaskPrediction(logits, mask, tuple(out_size))
