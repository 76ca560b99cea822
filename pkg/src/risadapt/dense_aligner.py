"""Dense Aligner: visual adapter with a dense mixture of convolutions and a
text-conditioned cross-attention step.

    F_v     = ReLU(down(f_v))
    F1      = conv1x1(F_v)
    F2      = conv3x3(squeeze(F_v, F1))
    F3      = conv5x5(squeeze(F_v, F1, F2))
    F_dense = cat(F1, F2, F3) + F_v
    F_cross = MHCA(F_dense, proj(f_t)) + F_v
    out     = up(F_cross)

Only patch tokens go through the convolutions; CLS/register tokens keep
F_dense = F_v and rejoin for the cross-attention and projections.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import DenseAlignerConfig
from .encoders import TextFeatures
from .errors import ConfigError, GeometryError
from .utils import seeded


class DenseAligner(nn.Module):
    def __init__(self, cfg: DenseAlignerConfig, embed_dim: int, text_dim: int,
                 grid_h: int, grid_w: int, patch_token_offset: int):
        super().__init__()
        cfg.validate()
        d = cfg.hidden_dim
        c1, c2, c3 = cfg.branches()
        self.cfg = cfg
        self.embed_dim = embed_dim
        self.grid = (grid_h, grid_w)
        self.offset = patch_token_offset

        self.down = nn.Linear(embed_dim, d)
        self.conv1 = nn.Conv2d(d, c1, 1)
        self.squeeze3 = nn.Conv2d(d + c1, c2, 1)
        self.conv3 = nn.Conv2d(c2, c2, 3, padding=1)
        self.squeeze5 = nn.Conv2d(d + c1 + c2, c3, 1)
        self.conv5 = nn.Conv2d(c3, c3, 5, padding=2)

        self.text_proj = nn.Linear(text_dim, d)
        self.query_norm = nn.LayerNorm(d) if cfg.query_norm else nn.Identity()
        self.cross_attn = nn.MultiheadAttention(d, cfg.num_cross_heads, batch_first=True)

        self.up = nn.Linear(d, embed_dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def down_project(self, f_v: torch.Tensor) -> torch.Tensor:
        if f_v.shape[-1] != self.embed_dim:
            raise ConfigError(f"input width {f_v.shape[-1]} != aligner embed_dim {self.embed_dim}")
        return F.relu(self.down(f_v))

    def _to_grid(self, tokens):
        gh, gw = self.grid
        b, n, c = tokens.shape
        if n != self.offset + gh * gw:
            raise GeometryError(f"{n} tokens cannot hold a {gh}x{gw} grid after {self.offset} prefix tokens")
        return tokens[:, self.offset:].transpose(1, 2).reshape(b, c, gh, gw)

    def dmoc_2d(self, F_v: torch.Tensor):
        """Dense 1x1/3x3/5x5 branches over the patch grid, each [B, c_i, gh, gw]."""
        x = self._to_grid(F_v)
        f1 = self.conv1(x)
        f2 = self.conv3(self.squeeze3(torch.cat([x, f1], 1)))
        f3 = self.conv5(self.squeeze5(torch.cat([x, f1, f2], 1)))
        return f1, f2, f3

    def dense_merge(self, F_v, f1, f2, f3) -> torch.Tensor:
        branches = torch.cat([f1, f2, f3], 1)
        if branches.shape[1] != F_v.shape[-1]:
            raise ConfigError(f"branch channels {branches.shape[1]} != hidden_dim {F_v.shape[-1]}")
        patch = branches.flatten(2).transpose(1, 2) + F_v[:, self.offset:]
        return torch.cat([F_v[:, :self.offset], patch], 1)

    def cross_align(self, F_dense, text: TextFeatures, F_v, need_weights=False):
        if not bool(text.attention_mask.any(1).all()):
            raise ValueError("every referring expression needs at least one unmasked token")
        kv = self.text_proj(text.token_features)
        out, weights = self.cross_attn(self.query_norm(F_dense), kv, kv,
                                       key_padding_mask=text.key_padding_mask,
                                       need_weights=need_weights, average_attn_weights=False)
        F_cross = out + F_v
        return (F_cross, weights) if need_weights else F_cross

    def up_project(self, F_cross):
        return self.up(F_cross)

    def forward(self, f_v, text: TextFeatures):
        F_v = self.down_project(f_v)
        F_dense = self.dense_merge(F_v, *self.dmoc_2d(F_v))
        return self.up_project(self.cross_align(F_dense, text, F_v))


class DenseAlignerStack(nn.Module):
    """One aligner per placement layer, keyed by the 1-indexed layer id."""

    def __init__(self, cfg: DenseAlignerConfig, embed_dim, text_dim, grid_h, grid_w, patch_token_offset,
                 init_seed=0):
        super().__init__()
        self.cfg = cfg
        aligners = {}
        for layer in cfg.placement_layers:
            with seeded(init_seed, "dense_aligner", layer):
                aligners[str(layer)] = DenseAligner(cfg, embed_dim, text_dim, grid_h, grid_w, patch_token_offset)
        self.aligners = nn.ModuleDict(aligners)

    def hooks(self, text: TextFeatures):
        return {int(k): (lambda h, m=m: m(h, text)) for k, m in self.aligners.items()}


def dmoc_param_count(hidden_dim, branches, spatial_dims):
    c1, c2, c3 = branches
    d = hidden_dim

    def conv(cin, cout, k):
        return cin * cout * k ** spatial_dims + cout

    return (conv(d, c1, 1) + conv(d + c1, c2, 1) + conv(c2, c2, 3)
            + conv(d + c1 + c2, c3, 1) + conv(c3, c3, 5))


def count_params(cfg: DenseAlignerConfig, embed_dim: int, text_dim: int | None = None) -> int:
    """Trainable parameters of all aligners described by ``cfg``."""
    text_dim = embed_dim if text_dim is None else text_dim
    d = cfg.hidden_dim
    one = (embed_dim * d + d                              # down
           + dmoc_param_count(d, cfg.branches(), 2)
           + text_dim * d + d                             # text key/value projection
           + (2 * d if cfg.query_norm else 0)
           + 4 * (d * d + d)                              # q, k, v, out projections
           + d * embed_dim + embed_dim)                   # up
    return one * len(cfg.placement_layers)
