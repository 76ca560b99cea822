from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .tokenizer import Vocab, tokenize_batch


@dataclass
class EncodedDataset:
    """Stacked tensors for a list of samples, ready for index batching."""

    images: torch.Tensor  # [N, 3, H, W]
    token_ids: torch.Tensor  # [N, S]
    masks: torch.Tensor  # [N, H, W] bool
    sample_ids: list[str]
    expressions: list[str]

    def __len__(self):
        return self.images.shape[0]

    @classmethod
    def from_samples(cls, samples, vocab: Vocab, max_len: int) -> "EncodedDataset":
        if not samples:
            raise ValueError("dataset is empty")
        ids, _ = tokenize_batch([s.expression for s in samples], vocab, max_len)
        return cls(torch.stack([s.image for s in samples]), ids, torch.stack([s.mask for s in samples]),
                   [s.sample_id for s in samples], [s.expression for s in samples])

    def subset(self, index) -> "EncodedDataset":
        index = torch.as_tensor(index, dtype=torch.long)
        return EncodedDataset(self.images[index], self.token_ids[index], self.masks[index],
                              [self.sample_ids[i] for i in index.tolist()],
                              [self.expressions[i] for i in index.tolist()])

    def batch(self, index):
        index = torch.as_tensor(index, dtype=torch.long)
        return self.images[index], self.token_ids[index], self.masks[index]

    def split(self, val_fraction: float, seed: int = 0):
        n = len(self)
        n_val = int(round(n * val_fraction))
        perm = np.random.default_rng(seed).permutation(n)
        return self.subset(np.sort(perm[n_val:])), self.subset(np.sort(perm[:n_val]))


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Sample order for one epoch; a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = epoch_order(n, seed, epoch)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
