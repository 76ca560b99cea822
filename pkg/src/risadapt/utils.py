import contextlib

import torch


def hash_seed(seed: int, name: str, index: int = 0) -> int:
    """Stable per-component seed so toggling one subsystem never shifts another's init."""
    acc = seed * 1_000_003 + index * 7919
    for ch in name:
        acc = (acc * 31 + ord(ch)) % (2 ** 31 - 1)
    return acc


@contextlib.contextmanager
def seeded(seed: int, name: str, index: int = 0):
    """Run module construction under an isolated, component-specific torch seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(hash_seed(seed, name, index))
        yield
