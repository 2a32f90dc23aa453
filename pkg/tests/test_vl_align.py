import numpy as np
import pytest
import torch
import torch.nn as nn

from conftest import gradient_check
from maxico.backbones import VitTapSet
from maxico.vl_align import TextPropagator, VisionLanguageAlign, VisualAggregator, dense_align


def identity_aggregator(dim, taps=4):
    agg = VisualAggregator(dim, dim, taps, heads=2).double()
    for i in range(taps):
        agg.trans_layers[i] = nn.Identity()
        with torch.no_grad():
            agg.reduce[i].weight.copy_(torch.eye(dim))
            agg.reduce[i].bias.zero_()
    return agg


def test_identity_aggregation_telescopes():
    xs = [torch.randn(2, 16, 8, dtype=torch.float64) for _ in range(4)]
    out = identity_aggregator(8)(xs)
    assert torch.allclose(out[0], xs[0] + xs[1] + xs[2] + xs[3], atol=1e-12)
    assert torch.allclose(out[3], xs[3], atol=0)


def test_aggregation_causal_order():
    torch.manual_seed(0)
    agg = VisualAggregator(8, 8, 4, heads=2).double()
    xs = [torch.randn(1, 16, 8, dtype=torch.float64) for _ in range(4)]
    base = agg(xs)

    deep = list(xs)
    deep[3] = deep[3] + 0.1 * torch.randn_like(deep[3])
    changed = agg(deep)
    assert all(not torch.allclose(a, b) for a, b in zip(base, changed))

    shallow = list(xs)
    shallow[0] = shallow[0] + 0.1 * torch.randn_like(shallow[0])
    changed = agg(shallow)
    assert not torch.allclose(base[0], changed[0])
    for a, b in zip(base[1:], changed[1:]):
        assert torch.equal(a, b)


def test_aggregation_shape_mismatch():
    agg = VisualAggregator(8, 8, 2, heads=2)
    with pytest.raises(ValueError, match="deeper aggregate"):
        agg([torch.randn(1, 16, 8), torch.randn(1, 9, 8)])


def test_identity_text_chain():
    torch.manual_seed(0)
    prop = TextPropagator(6, 8, 4).double()
    for i in range(3):
        prop.mlps[i] = nn.Identity()
    y = torch.randn(2, 6, dtype=torch.float64)
    out = prop(y)
    projected = prop.mlps[3](y)
    assert all(torch.equal(o, projected) for o in out)


def test_zero_text_bias_free():
    prop = TextPropagator(6, 8, 4, bias=False)
    out = prop(torch.zeros(3, 6))
    assert all(torch.count_nonzero(o) == 0 for o in out)


def test_text_propagation_direction():
    torch.manual_seed(0)
    prop = TextPropagator(6, 8, 4).double()
    y = torch.randn(1, 6, dtype=torch.float64)
    out = prop(y)
    # perturbing Y_2 (through its MLP) moves Y_1 but leaves Y_3, Y_4 untouched
    with torch.no_grad():
        prop.mlps[1][0].weight.add_(0.1)
    moved = prop(y)
    assert torch.equal(out[2], moved[2]) and torch.equal(out[3], moved[3])
    assert not torch.allclose(out[1], moved[1])
    assert not torch.allclose(out[0], moved[0])


def test_dense_align_identities():
    x = torch.randn(2, 16, 5, dtype=torch.float64)
    reshaped = x.transpose(1, 2).reshape(2, 5, 4, 4)
    assert torch.equal(dense_align(x, torch.ones(2, 5, dtype=torch.float64), (4, 4)), reshaped)
    assert torch.count_nonzero(dense_align(x, torch.zeros(2, 5, dtype=torch.float64), (4, 4))) == 0


def test_dense_align_scalar_loop_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 12, 3))
    y = rng.normal(size=(1, 3))
    z = dense_align(torch.from_numpy(x), torch.from_numpy(y), (3, 4)).numpy()
    for p in range(12):
        for c in range(3):
            assert z[0, c, p // 4, p % 4] == x[0, p, c] * y[0, c]


def test_dense_align_bilinear_in_x():
    x = torch.randn(1, 16, 4, dtype=torch.float64)
    y = torch.randn(1, 4, dtype=torch.float64)
    assert torch.allclose(dense_align(2.5 * x, y, (4, 4)), 2.5 * dense_align(x, y, (4, 4)), rtol=1e-15, atol=0)


def test_dense_align_shape_errors():
    with pytest.raises(ValueError, match="grid"):
        dense_align(torch.randn(1, 15, 4), torch.randn(1, 4), (4, 4))
    with pytest.raises(ValueError, match="broadcast"):
        dense_align(torch.randn(1, 16, 4), torch.randn(1, 3), (4, 4))


def test_alignment_gradients_match_finite_differences():
    torch.manual_seed(1)
    align = VisionLanguageAlign(vit_dim=6, text_dim=5, align_dim=4, num_taps=4, heads=2).double()
    taps = VitTapSet((3, 6, 9, 12), [torch.randn(1, 16, 6, dtype=torch.float64) for _ in range(4)], (4, 4))
    text = torch.randn(1, 5, dtype=torch.float64)
    weights = [torch.randn(1, 4, 4, 4, dtype=torch.float64) for _ in range(4)]

    def loss():
        zs = align(taps, text).aligned
        return sum((z * w).sum() for z, w in zip(zs, weights))

    params = list(align.parameters())
    assert gradient_check(loss, params, max_entries=12) < 1e-4
