import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from risadapt.config import DenseAlignerConfig, default_branch_split
from risadapt.dense_aligner import DenseAligner, DenseAlignerStack, count_params
from risadapt.encoders import TextFeatures
from risadapt.errors import ConfigError, GeometryError

from conftest import randomize_up_projections

EMBED, TEXT, GRID, OFFSET = 24, 20, 6, 3


def make(hidden=12, heads=2, **kw):
    torch.manual_seed(0)
    cfg = DenseAlignerConfig(hidden_dim=hidden, num_cross_heads=heads, placement_layers=(1,), **kw)
    return DenseAligner(cfg, EMBED, TEXT, GRID, GRID, OFFSET).eval()


def text_features(b=2, s=5, lengths=(3, 5), seed=1):
    g = torch.Generator().manual_seed(seed)
    mask = torch.arange(s)[None] < torch.tensor(lengths)[:, None]
    return TextFeatures(torch.randn(b, s, TEXT, generator=g), torch.randn(b, TEXT, generator=g), mask)


def tokens(b=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(b, OFFSET + GRID * GRID, EMBED, generator=g)


def test_default_branch_split():
    assert default_branch_split(128) == (44, 42, 42)
    assert default_branch_split(64) == (22, 21, 21)
    assert default_branch_split(12) == (4, 4, 4)
    assert sum(default_branch_split(13)) == 13


def test_zero_init_output():
    da = make()
    out = da(tokens(), text_features())
    assert out.shape == (2, OFFSET + GRID * GRID, EMBED)
    assert torch.count_nonzero(out) == 0


def test_branch_shapes_and_density():
    da = make()
    F_v = da.down_project(tokens())
    f1, f2, f3 = da.dmoc_2d(F_v)
    assert [f.shape[1] for f in (f1, f2, f3)] == [4, 4, 4]
    assert all(f.shape[-2:] == (GRID, GRID) for f in (f1, f2, f3))
    # each larger kernel consumes the input plus every smaller branch
    assert da.squeeze3.in_channels == 12 + 4
    assert da.squeeze5.in_channels == 12 + 4 + 4
    assert (F_v >= 0).all()


def test_receptive_field_is_seven_by_seven():
    # 1x1 -> 3x3 -> 5x5 chain: a single patch influences at most a 7x7 window
    da = make()
    F_v = da.down_project(tokens(1)).detach().requires_grad_(True)
    F_dense = da.dense_merge(F_v, *da.dmoc_2d(F_v))
    F_dense[0, OFFSET].sum().backward()  # patch (0, 0)
    grid = F_v.grad[0, OFFSET:].abs().sum(-1).view(GRID, GRID)
    assert torch.count_nonzero(grid[4:]) == 0 and torch.count_nonzero(grid[:, 4:]) == 0
    assert grid[3, 3] != 0  # far corner of the window
    assert F_v.grad[0, :OFFSET].abs().sum() == 0  # prefix tokens do not reach patch features


def test_prefix_tokens_bypass_convolutions():
    da = make()
    F_v = da.down_project(tokens())
    F_dense = da.dense_merge(F_v, *da.dmoc_2d(F_v))
    assert torch.equal(F_dense[:, :OFFSET], F_v[:, :OFFSET])
    bumped = F_v.clone()
    bumped[:, :OFFSET] += 1.0
    F_dense2 = da.dense_merge(bumped, *da.dmoc_2d(bumped))
    assert torch.equal(F_dense2[:, OFFSET:], F_dense[:, OFFSET:])


def test_padding_invisible_to_cross_attention():
    da = make()
    randomize_up_projections(da, seed=3)
    x, text = tokens(), text_features()
    out = da(x, text)
    noisy = TextFeatures(text.token_features.clone(), text.sentence_feature, text.attention_mask)
    noisy.token_features[0, 3:] = 1e3
    torch.testing.assert_close(da(x, noisy), out, rtol=0, atol=1e-5)


def test_cross_attention_weights_respect_mask():
    da = make()
    F_v = da.down_project(tokens())
    F_dense = da.dense_merge(F_v, *da.dmoc_2d(F_v))
    _, w = da.cross_align(F_dense, text_features(), F_v, need_weights=True)
    assert w.shape == (2, 2, OFFSET + GRID * GRID, 5)
    assert torch.all(w[0, :, :, 3:] == 0)
    torch.testing.assert_close(w.sum(-1), torch.ones_like(w.sum(-1)))


def test_errors():
    da = make()
    with pytest.raises(ConfigError):
        da(torch.randn(1, OFFSET + GRID * GRID, EMBED + 1), text_features(1, 5, (3,)))
    with pytest.raises(GeometryError):
        da(torch.randn(1, OFFSET + GRID * GRID - 1, EMBED), text_features(1, 5, (3,)))
    with pytest.raises(ValueError):
        da(tokens(1), text_features(1, 5, (0,)))
    with pytest.raises(ConfigError):
        DenseAlignerConfig(hidden_dim=10, num_cross_heads=4).validate()
    with pytest.raises(ConfigError):
        DenseAlignerConfig(hidden_dim=12, branch_channels=(4, 4, 5)).validate()


@given(hidden=st.sampled_from([6, 8, 12, 16, 20]), heads=st.sampled_from([1, 2]),
       layers=st.lists(st.integers(1, 6), min_size=1, max_size=4, unique=True).map(sorted),
       qn=st.booleans())
@settings(max_examples=25, deadline=None)
def test_count_params_matches_modules(hidden, heads, layers, qn):
    cfg = DenseAlignerConfig(hidden_dim=hidden, num_cross_heads=heads, placement_layers=tuple(layers),
                             query_norm=qn)
    stack = DenseAlignerStack(cfg, EMBED, TEXT, GRID, GRID, OFFSET)
    assert sum(p.numel() for p in stack.parameters()) == count_params(cfg, EMBED, TEXT)


def test_stack_hooks_and_seeding():
    cfg = DenseAlignerConfig(hidden_dim=12, num_cross_heads=2, placement_layers=(2, 4))
    a = DenseAlignerStack(cfg, EMBED, TEXT, GRID, GRID, OFFSET, init_seed=5)
    b = DenseAlignerStack(cfg, EMBED, TEXT, GRID, GRID, OFFSET, init_seed=5)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    assert not torch.equal(a.aligners["2"].down.weight, a.aligners["4"].down.weight)
    hooks = a.hooks(text_features())
    assert sorted(hooks) == [2, 4]
    assert hooks[2](tokens()).shape == tokens().shape
