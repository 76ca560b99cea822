"""Word-level vocabulary and tokenizer."""
from __future__ import annotations

import re
from pathlib import Path

import torch

from ..errors import ConfigError

PAD, EOS, UNK = "<pad>", "<eos>", "<unk>"
_WORD = re.compile(r"[a-z0-9]+")


def words(expression: str) -> list[str]:
    return _WORD.findall(expression.lower())


class Vocab:
    """Dense token -> id map; ids 0, 1, 2 are pad, eos, unk."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tokens[:3] != [PAD, EOS, UNK]:
            tokens = [PAD, EOS, UNK] + [t for t in tokens if t not in (PAD, EOS, UNK)]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    pad_id = 0
    eos_id = 1
    unk_id = 2

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    @classmethod
    def build(cls, expressions) -> "Vocab":
        seen = {}
        for e in expressions:
            for w in words(e):
                seen.setdefault(w, None)
        return cls(sorted(seen))

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text().splitlines()
        return cls([ln for ln in lines if ln])

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")


def tokenize(expression: str, vocab: Vocab, max_len: int):
    """Returns (ids, mask) as int64 / bool tensors of length ``max_len``.

    Words past ``max_len - 1`` are dropped so the eos token always fits.
    """
    if max_len < 2:
        raise ConfigError("max_len must be >= 2")
    ids = [vocab.id(w) for w in words(expression)][: max_len - 1] + [vocab.eos_id]
    n = len(ids)
    ids = ids + [vocab.pad_id] * (max_len - n)
    mask = [True] * n + [False] * (max_len - n)
    return torch.tensor(ids, dtype=torch.long), torch.tensor(mask)


def tokenize_batch(expressions, vocab: Vocab, max_len: int):
    pairs = [tokenize(e, vocab, max_len) for e in expressions]
    return torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])
