import dataclasses

import pytest
import torch

from risadapt.config import (BackbonesConfig, DenseAlignerConfig, HeadConfig, ProjectConfig,
                             TextAdapterConfig, TextBackboneConfig, TrainConfig, VisionBackboneConfig)
from risadapt.dataio import EncodedDataset, synth_generate, synth_vocab
from risadapt.model import build_model


def tiny_config(**train_overrides) -> ProjectConfig:
    """Smallest config that still exercises every subsystem."""
    cfg = ProjectConfig(
        backbones=BackbonesConfig(
            vision=VisionBackboneConfig(num_layers=3, embed_dim=32, num_heads=2, patch_size=8, image_size=32,
                                        num_register_tokens=2),
            text=TextBackboneConfig(num_layers=2, embed_dim=32, num_heads=2, vocab_size=20, max_seq_len=10),
        ),
        dense_aligner=DenseAlignerConfig(hidden_dim=12, num_cross_heads=2, placement_layers=(1, 3)),
        text_adapter=TextAdapterConfig(hidden_dim=6, placement_layers=(1,)),
        head=HeadConfig(neck_dim=16, num_heads=2, pixel_dim=8),
        train=TrainConfig(epochs=10, decay_epoch=5, batch_size=4, base_lr=1e-3),
    )
    if train_overrides:
        cfg = cfg.replace(train=dataclasses.replace(cfg.train, **train_overrides))
    return cfg.validate()


def randomize_up_projections(model, scale=0.05, seed=0):
    """Give zero-initialised adapter up-projections non-zero values."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith("up.") or ".up." in name:
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)


def token_batch(vocab_size, eos_id, lengths, seq_len, seed=0, pad_id=0):
    g = torch.Generator().manual_seed(seed)
    ids = torch.full((len(lengths), seq_len), pad_id, dtype=torch.long)
    for i, n in enumerate(lengths):
        words = torch.randint(3, vocab_size, (n - 1,), generator=g)
        ids[i, :n - 1] = words
        ids[i, n - 1] = eos_id
    return ids


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg)


@pytest.fixture(scope="session")
def synth16():
    return synth_generate(0, 16, image_size=32)


@pytest.fixture(scope="session")
def tiny_dataset(synth16):
    return EncodedDataset.from_samples(synth16, synth_vocab(), 10)


# One PASS/FAIL line per acceptance criterion, echoed at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
