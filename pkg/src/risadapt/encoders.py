"""Frozen toy-scale vision and text transformers with adapter attachment points.

Adapters run in parallel to each block's MLP: they read the same
post-layernorm input and their output is added to the residual stream next
to the MLP output.  With no adapter at a layer the block computes exactly the
plain pre-LN transformer update.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TextBackboneConfig, VisionBackboneConfig
from .errors import GeometryError, LengthError

Adapter = Callable[[torch.Tensor], torch.Tensor]


def tap_layers(num_layers: int) -> tuple[int, int, int]:
    """1-indexed layers feeding the head: ceil(L/3), ceil(2L/3), L."""
    return (math.ceil(num_layers / 3), math.ceil(2 * num_layers / 3), num_layers)


@dataclass
class VisionFeatureMap:
    tokens: torch.Tensor  # [B, N, C]
    grid_h: int
    grid_w: int
    patch_token_offset: int

    def __post_init__(self):
        expected = self.patch_token_offset + self.grid_h * self.grid_w
        if self.tokens.shape[1] != expected:
            raise GeometryError(f"{self.tokens.shape[1]} tokens, expected {expected}")

    @property
    def patch_tokens(self) -> torch.Tensor:
        return self.tokens[:, self.patch_token_offset:]

    def patch_grid(self) -> torch.Tensor:
        """Patch tokens as a [B, C, grid_h, grid_w] map."""
        b, _, c = self.tokens.shape
        return self.patch_tokens.transpose(1, 2).reshape(b, c, self.grid_h, self.grid_w)


@dataclass
class TextFeatures:
    token_features: torch.Tensor  # [B, S, C]
    sentence_feature: torch.Tensor  # [B, C]
    attention_mask: torch.Tensor  # [B, S] bool, True for real tokens (eos included)

    @property
    def key_padding_mask(self) -> torch.Tensor:
        # nn.MultiheadAttention convention: True means "ignore".
        return ~self.attention_mask


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, attn_mask=None):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, attn_mask=None, adapter: Adapter | None = None):
        x = x + self.attn(self.norm1(x), attn_mask)
        h = self.norm2(x)
        out = x + self.mlp(h)
        if adapter is not None:
            out = out + adapter(h)
        return out


def _init_transformer(module: nn.Module):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class VisionBackbone(nn.Module):
    """ViT with optional CLS and register tokens (registers carry no position embedding)."""

    def __init__(self, cfg: VisionBackboneConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Conv2d(3, d, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d)) if cfg.has_cls_token else None
        self.register_tokens = (nn.Parameter(torch.zeros(1, cfg.num_register_tokens, d))
                                if cfg.num_register_tokens else None)
        n_pos = cfg.grid_size ** 2 + int(cfg.has_cls_token)
        self.pos_embed = nn.Parameter(torch.zeros(1, n_pos, d))
        self.blocks = nn.ModuleList(Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.num_layers))
        self.norm = nn.LayerNorm(d)
        self.register_buffer("pixel_mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1), persistent=False)

        _init_transformer(self)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        if self.cls_token is not None:
            nn.init.normal_(self.cls_token, std=1e-6)
        if self.register_tokens is not None:
            nn.init.normal_(self.register_tokens, std=1e-6)

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if image.dim() != 4 or image.shape[1] != 3:
            raise GeometryError(f"expected image [B, 3, H, W], got {tuple(image.shape)}")
        if image.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise GeometryError(f"image size {tuple(image.shape[-2:])} != configured {cfg.image_size}")
        x = (image - self.pixel_mean.to(image.dtype)) / self.pixel_std.to(image.dtype)
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        b = x.shape[0]
        if self.cls_token is not None:
            x = torch.cat([self.cls_token.expand(b, -1, -1), x], dim=1)
        x = x + self.pos_embed
        if self.register_tokens is not None:
            x = torch.cat([x[:, :1], self.register_tokens.expand(b, -1, -1), x[:, 1:]], dim=1) \
                if self.cls_token is not None else torch.cat([self.register_tokens.expand(b, -1, -1), x], dim=1)
        return x

    def feature_map(self, tokens) -> VisionFeatureMap:
        g = self.cfg.grid_size
        return VisionFeatureMap(tokens, g, g, self.cfg.patch_token_offset)

    def forward(self, image, adapters: Mapping[int, Adapter] | None = None):
        """Returns (three tap maps, final normalised map)."""
        adapters = adapters or {}
        taps = tap_layers(self.cfg.num_layers)
        x = self.embed(image)
        tapped = {}
        for i, block in enumerate(self.blocks, start=1):
            x = block(x, adapter=adapters.get(i))
            if i in taps:
                tapped[i] = x
        hierarchical = [self.feature_map(tapped[i]) for i in taps]
        return hierarchical, self.feature_map(self.norm(x))


class TextBackbone(nn.Module):
    """Causal text transformer; sentence feature is read at the eos position."""

    def __init__(self, cfg: TextBackboneConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.token_embedding = nn.Embedding(cfg.vocab_size, d)
        self.positional_embedding = nn.Parameter(torch.zeros(cfg.max_seq_len, d))
        self.blocks = nn.ModuleList(Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.num_layers))
        self.ln_final = nn.LayerNorm(d)
        self.text_projection = nn.Linear(d, d, bias=False)

        _init_transformer(self)
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        nn.init.normal_(self.positional_embedding, std=0.01)
        nn.init.normal_(self.text_projection.weight, std=d ** -0.5)

    def eos_positions(self, token_ids: torch.Tensor) -> torch.Tensor:
        is_eos = token_ids == self.cfg.eos_token_id
        counts = is_eos.sum(1)
        if not bool((counts == 1).all()):
            raise ValueError("every sequence must contain exactly one eos token")
        return is_eos.int().argmax(1)

    def attention_mask(self, token_ids):
        """[B, S] True at real tokens, i.e. every position up to and including eos."""
        eos = self.eos_positions(token_ids)
        pos = torch.arange(token_ids.shape[1], device=token_ids.device)
        return pos[None, :] <= eos[:, None]

    def forward(self, token_ids, adapters: Mapping[int, Callable] | None = None) -> TextFeatures:
        cfg = self.cfg
        if token_ids.dim() != 2:
            raise ValueError("token_ids must be [batch, seq_len]")
        b, s = token_ids.shape
        if s > cfg.max_seq_len:
            raise LengthError(f"sequence length {s} exceeds max_seq_len {cfg.max_seq_len}")
        if bool((token_ids < 0).any()) or bool((token_ids >= cfg.vocab_size).any()):
            raise ValueError("token id out of vocabulary range")
        adapters = adapters or {}
        mask = self.attention_mask(token_ids)
        causal = torch.ones(s, s, dtype=torch.bool, device=token_ids.device).tril()
        attn_mask = (causal[None] & mask[:, None, :])[:, None]  # [B, 1, S, S]

        x = self.token_embedding(token_ids) + self.positional_embedding[:s]
        for i, block in enumerate(self.blocks, start=1):
            adapter = adapters.get(i)
            bound = (lambda h, a=adapter: a(h, mask)) if adapter is not None else None
            x = block(x, attn_mask=attn_mask, adapter=bound)
        hidden = self.ln_final(x)
        projected = self.text_projection(hidden)
        eos = mask.sum(1) - 1
        sentence = projected[torch.arange(b, device=token_ids.device), eos]
        tokens = projected if cfg.feature_source == "projected" else hidden
        return TextFeatures(tokens, sentence, mask)


def freeze_backbones(model):
    """Freeze encoder weights, unfreeze everything else; returns the census."""
    from .objective import param_report

    backbone_ids = {id(p) for enc in (model.vision, model.text) for p in enc.parameters()}
    for p in model.parameters():
        p.requires_grad_(id(p) not in backbone_ids)
    model.vision.eval()
    model.text.eval()
    return param_report(model)
