import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from risadapt.config import TextAdapterConfig
from risadapt.errors import ConfigError
from risadapt.text_adapter import TextAdapter, TextAdapterStack, count_params

from conftest import randomize_up_projections

DIM = 16


def make(hidden=6, activation=False, seed=0):
    torch.manual_seed(seed)
    return TextAdapter(TextAdapterConfig(hidden_dim=hidden, placement_layers=(1,), activation=activation), DIM)


def lengths_mask(lengths, s):
    return torch.arange(s)[None] < torch.tensor(lengths)[:, None]


def test_zero_init():
    ta = make()
    x = torch.randn(2, 7, DIM)
    out = ta(x, lengths_mask([3, 7], 7))
    assert out.shape == x.shape and torch.count_nonzero(out) == 0


@given(length=st.integers(1, 6), extra=st.integers(1, 5), seed=st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_padding_never_reaches_real_tokens(length, extra, seed):
    ta = make(seed=seed % 7)
    randomize_up_projections(ta, scale=0.3, seed=seed)
    g = torch.Generator().manual_seed(seed)
    real = torch.randn(1, length, DIM, generator=g)
    short = ta(real, torch.ones(1, length, dtype=torch.bool))
    padded = torch.cat([real, torch.randn(1, extra, DIM, generator=g) * 50], 1)
    long = ta(padded, lengths_mask([length], length + extra))
    torch.testing.assert_close(long[:, :length], short, rtol=1e-5, atol=1e-6)


def test_kernel_reach_is_seven_tokens():
    ta = make()
    randomize_up_projections(ta, scale=0.3)
    x = torch.randn(1, 12, DIM, requires_grad=True)
    ta(x, torch.ones(1, 12, dtype=torch.bool))[0, 0].sum().backward()
    reach = x.grad[0].abs().sum(-1)
    assert torch.count_nonzero(reach[4:]) == 0
    assert reach[3] != 0


def test_activation_flag():
    x = torch.randn(2, 5, DIM)
    mask = torch.ones(2, 5, dtype=torch.bool)
    plain, relu = make(activation=False), make(activation=True)
    randomize_up_projections(plain)
    randomize_up_projections(relu)
    assert not torch.allclose(plain(x, mask), relu(x, mask))


@given(hidden=st.integers(3, 24), layers=st.lists(st.integers(1, 4), min_size=1, max_size=4, unique=True))
@settings(max_examples=25, deadline=None)
def test_count_params_matches_modules(hidden, layers):
    cfg = TextAdapterConfig(hidden_dim=hidden, placement_layers=tuple(sorted(layers)))
    stack = TextAdapterStack(cfg, DIM)
    assert sum(p.numel() for p in stack.parameters()) == count_params(cfg, DIM)


def test_config_errors():
    with pytest.raises(ConfigError):
        TextAdapterConfig(hidden_dim=2).validate()
    with pytest.raises(ConfigError):
        TextAdapterConfig(placement_layers=(3, 1)).validate()
    with pytest.raises(ConfigError):
        TextAdapterConfig(placement_layers=(1, 5)).validate(num_layers=4)
