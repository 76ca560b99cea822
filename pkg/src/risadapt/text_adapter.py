"""1-D dense mixture-of-convolutions adapter for the text encoder.

    F_t   = down(f_t)                 (optional ReLU, off by default)
    F1    = conv1(F_t)
    F2    = conv3(squeeze(F_t, F1))
    F3    = conv5(squeeze(F_t, F1, F2))
    delta = up(cat(F1, F2, F3) + F_t)

Padded positions are zeroed before every convolution, so padding never reaches
real tokens.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TextAdapterConfig
from .dense_aligner import dmoc_param_count
from .utils import seeded


class TextAdapter(nn.Module):
    def __init__(self, cfg: TextAdapterConfig, embed_dim: int):
        super().__init__()
        cfg.validate()
        d = cfg.hidden_dim
        c1, c2, c3 = cfg.branches()
        self.cfg = cfg
        self.down = nn.Linear(embed_dim, d)
        self.conv1 = nn.Conv1d(d, c1, 1)
        self.squeeze3 = nn.Conv1d(d + c1, c2, 1)
        self.conv3 = nn.Conv1d(c2, c2, 3, padding=1)
        self.squeeze5 = nn.Conv1d(d + c1 + c2, c3, 1)
        self.conv5 = nn.Conv1d(c3, c3, 5, padding=2)
        self.up = nn.Linear(d, embed_dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def dmoc_1d(self, x, keep):
        """x: [B, d, S]; keep: [B, 1, S] float, 1 at real tokens."""
        x = x * keep
        f1 = self.conv1(x) * keep
        f2 = self.conv3(self.squeeze3(torch.cat([x, f1], 1)) * keep) * keep
        f3 = self.conv5(self.squeeze5(torch.cat([x, f1, f2], 1)) * keep) * keep
        return torch.cat([f1, f2, f3], 1) + x

    def forward(self, f_t, mask):
        if f_t.shape[1] < 1:
            raise ValueError("text adapter needs at least one position")
        F_t = self.down(f_t)
        if self.cfg.activation:
            F_t = F.relu(F_t)
        keep = mask[:, None, :].to(F_t.dtype)
        mixed = self.dmoc_1d(F_t.transpose(1, 2), keep)
        return self.up(mixed.transpose(1, 2))


class TextAdapterStack(nn.Module):
    def __init__(self, cfg: TextAdapterConfig, embed_dim: int, init_seed=0):
        super().__init__()
        self.cfg = cfg
        adapters = {}
        for layer in cfg.placement_layers:
            with seeded(init_seed, "text_adapter", layer):
                adapters[str(layer)] = TextAdapter(cfg, embed_dim)
        self.adapters = nn.ModuleDict(adapters)

    def hooks(self):
        return {int(k): m for k, m in self.adapters.items()}


def count_params(cfg: TextAdapterConfig, embed_dim: int) -> int:
    d = cfg.hidden_dim
    one = (embed_dim * d + d
           + dmoc_param_count(d, cfg.branches(), 1)
           + d * embed_dim + embed_dim)
    return one * len(cfg.placement_layers)
