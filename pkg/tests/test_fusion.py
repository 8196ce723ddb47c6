import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from clinsynth.errors import ConfigError
from clinsynth.fusion import (
    AffineFusion,
    AffineFusionBlock,
    CrossAttentionFusion,
    FusionShapeError,
    affine_fuse,
    cross_attention_fuse,
    make_fusion_layer,
    make_fusion_stack,
)


def randomize(module, seed=0, scale=0.5):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def central_difference(loss_fn, param, eps=1e-6):
    grad = torch.zeros_like(param)
    flat, gflat = param.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = loss_fn().item()
        flat[i] = orig - eps
        down = loss_fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


# -- affine -----------------------------------------------------------------

def test_affine_identity_at_init_bitwise():
    x = torch.randn(2, 4, 3, 5, 2)
    emb = torch.randn(2, 10)
    for unit in (AffineFusion(4, 10), AffineFusionBlock(4, 10)):
        out = affine_fuse(x, emb, unit)
        assert torch.equal(out, x)


def test_affine_hand_case():
    unit = AffineFusion(1, 1)
    with torch.no_grad():
        unit.mlp_gamma[2].bias.fill_(2.0)
        unit.mlp_theta[2].bias.fill_(3.0)
    out = unit(torch.ones(1, 1, 1, 1, 1), torch.ones(1, 1))
    assert out.item() == 5.0


def test_affine_broadcast_per_channel():
    unit = AffineFusion(3, 4)
    with torch.no_grad():
        unit.mlp_gamma[2].bias.copy_(torch.tensor([1.0, 2.0, 3.0]))
        unit.mlp_theta[2].bias.copy_(torch.tensor([0.0, -1.0, 10.0]))
    x = torch.randn(2, 3, 2, 2, 2)
    out = unit(x, torch.randn(2, 4))
    expected = x * torch.tensor([1.0, 2.0, 3.0]).view(1, 3, 1, 1, 1) + torch.tensor([0.0, -1.0, 10.0]).view(1, 3, 1, 1, 1)
    torch.testing.assert_close(out, expected, rtol=0, atol=1e-6)


def test_affine_block_matches_composition():
    block = randomize(AffineFusionBlock(2, 3), seed=1).double()
    x = torch.randn(2, 2, 2, 2, 2, dtype=torch.float64)
    emb = torch.randn(2, 3, dtype=torch.float64)
    h = block.fuse1(x, emb)
    expected = block.fuse2(h + block.conv(h), emb)
    torch.testing.assert_close(block(x, emb), expected)


@pytest.mark.parametrize("unit_cls", [AffineFusion, AffineFusionBlock])
def test_affine_gradient_matches_finite_differences(unit_cls):
    torch.manual_seed(0)
    unit = randomize(unit_cls(2, 2), seed=2).double()
    x = torch.randn(2, 2, 2, 2, 2, dtype=torch.float64)
    emb = torch.randn(2, 2, dtype=torch.float64)
    target = torch.randn(2, 2, 2, 2, 2, dtype=torch.float64)
    gamma_mod = unit.mlp_gamma if unit_cls is AffineFusion else unit.fuse1.mlp_gamma

    def loss():
        return ((unit(x, emb) - target) ** 2).sum()

    for param in (gamma_mod[0].weight, gamma_mod[2].weight):
        unit.zero_grad()
        loss().backward()
        analytic = param.grad.clone()
        with torch.no_grad():
            numeric = central_difference(loss, param)
        np.testing.assert_allclose(analytic.numpy(), numeric.numpy(), rtol=1e-3, atol=1e-5)


def test_affine_channel_mismatch_message():
    with pytest.raises(FusionShapeError, match="expected C=4, got C=3"):
        AffineFusion(4, 8)(torch.zeros(1, 3, 2, 2, 2), torch.zeros(1, 8))


@pytest.mark.parametrize("x_shape,e_shape", [((1, 4, 2, 2), (1, 8)), ((2, 4, 2, 2, 2), (1, 8)), ((1, 4, 2, 2, 2), (1, 7))])
def test_shape_errors(x_shape, e_shape):
    for unit in (AffineFusion(4, 8), CrossAttentionFusion(4, 8)):
        with pytest.raises(FusionShapeError):
            unit(torch.zeros(x_shape), torch.zeros(e_shape))


# -- cross-attention --------------------------------------------------------

def test_attention_weights_sum_to_one():
    unit = randomize(CrossAttentionFusion(4, 6, key_dim=5), seed=3)
    w = unit.attention_weights(torch.randn(2, 4, 3, 3, 3), torch.randn(2, 6))
    assert w.shape == (2, 27)
    assert torch.all(w >= 0)
    np.testing.assert_allclose(w.sum(-1).detach().numpy(), 1.0, atol=1e-5)


def test_attention_weights_oracle():
    unit = randomize(CrossAttentionFusion(3, 5, key_dim=4), seed=4).double()
    x = torch.randn(2, 3, 2, 3, 2, dtype=torch.float64)
    emb = torch.randn(2, 5, dtype=torch.float64)
    xn, en = x.numpy(), emb.numpy()
    wq, bq = unit.conv_q.weight.detach().numpy()[:, :, 0, 0, 0], unit.conv_q.bias.detach().numpy()
    wk, bk = unit.w_k.weight.detach().numpy(), unit.w_k.bias.detach().numpy()
    wv, bv = unit.conv_v.weight.detach().numpy()[:, :, 0, 0, 0], unit.conv_v.bias.detach().numpy()
    for b in range(2):
        feats = xn[b].reshape(3, -1)  # C, N
        q = wq @ feats + bq[:, None]
        k = wk @ en[b] + bk
        logits = (k @ q) / np.sqrt(4)
        w = np.exp(logits - logits.max())
        w /= w.sum()
        v = wv @ feats + bv[:, None]
        expected = (v * w[None] + feats).reshape(xn[b].shape)
        np.testing.assert_allclose(unit(x, emb)[b].detach().numpy(), expected, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("residual", [True, False])
def test_attention_single_voxel(residual):
    unit = randomize(CrossAttentionFusion(3, 4, residual=residual), seed=5)
    x = torch.randn(2, 3, 1, 1, 1)
    emb = torch.randn(2, 4)
    assert torch.equal(unit.attention_weights(x, emb), torch.ones(2, 1))
    v = unit.conv_v(x)
    assert torch.equal(unit(x, emb), v + x if residual else v)


def test_attention_zero_key_uniform():
    unit = randomize(CrossAttentionFusion(4, 6), seed=6)
    with torch.no_grad():
        unit.w_k.weight.zero_()
        unit.w_k.bias.zero_()
    w = unit.attention_weights(torch.randn(3, 4, 2, 3, 4), torch.randn(3, 6))
    assert torch.equal(w, torch.full_like(w, 1.0 / 24))


def test_attention_gradient_matches_finite_differences():
    unit = randomize(CrossAttentionFusion(2, 3, key_dim=2), seed=7).double()
    x = torch.randn(2, 2, 2, 2, 2, dtype=torch.float64)
    emb = torch.randn(2, 3, dtype=torch.float64)

    def loss():
        return (cross_attention_fuse(x, emb, unit) ** 3).sum()

    for param in (unit.conv_q.weight, unit.w_k.weight, unit.conv_v.weight):
        unit.zero_grad()
        loss().backward()
        analytic = param.grad.clone()
        with torch.no_grad():
            numeric = central_difference(loss, param)
        np.testing.assert_allclose(analytic.numpy(), numeric.numpy(), rtol=1e-3, atol=1e-5)


def test_attention_scale():
    assert CrossAttentionFusion(8, 4).scale == pytest.approx(8 ** -0.5)
    assert CrossAttentionFusion(8, 4, key_dim=2).scale == pytest.approx(2 ** -0.5)


# -- properties -------------------------------------------------------------

dims = st.integers(1, 3)


@settings(max_examples=30, deadline=None)
@given(b=st.integers(1, 2), c=st.integers(1, 4), d=dims, h=dims, w=dims, e=st.integers(1, 6),
       kind=st.sampled_from(["affine", "cross_attention"]), seed=st.integers(0, 2 ** 16))
def test_shape_preserving_and_sensitive(b, c, d, h, w, e, kind, seed):
    unit = randomize(make_fusion_layer(kind, c, e), seed=seed)
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(b, c, d, h, w, generator=g)
    e1, e2 = torch.randn(b, e, generator=g), torch.randn(b, e, generator=g)
    out = unit(x, e1)
    assert out.shape == x.shape and torch.all(torch.isfinite(out))
    if kind == "affine" or d * h * w > 1:
        assert (unit(x, e2) - out).norm() > 0


@settings(max_examples=30, deadline=None)
@given(shape=st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
       seed=st.integers(0, 2 ** 16))
def test_softmax_normalisation_property(shape, seed):
    b, d, h, w = shape
    unit = randomize(CrossAttentionFusion(3, 5), seed=seed, scale=2.0)
    g = torch.Generator().manual_seed(seed)
    weights = unit.attention_weights(torch.randn(b, 3, d, h, w, generator=g), torch.randn(b, 5, generator=g))
    assert torch.allclose(weights.sum(-1), torch.ones(b), atol=1e-5)


# -- stacks -----------------------------------------------------------------

def test_stack_single_affine():
    stack = make_fusion_stack("affine", [32], 16)
    assert len(stack) == 1
    x = torch.randn(1, 32, 2, 2, 2)
    assert torch.equal(stack[0](x, torch.randn(1, 16)), x)


def test_stack_cross_attention_unshared():
    stack = make_fusion_stack("cross_attention", [16, 32, 64], 8)
    assert [layer.channels for layer in stack] == [16, 32, 64]
    ids = [{id(p) for p in layer.parameters()} for layer in stack]
    assert not (ids[0] & ids[1] or ids[1] & ids[2] or ids[0] & ids[2])
    for layer in stack:
        with torch.no_grad():
            layer.w_k.weight.zero_()
            layer.w_k.bias.zero_()
        w = layer.attention_weights(torch.randn(2, layer.channels, 2, 2, 2), torch.randn(2, 8))
        assert torch.equal(w, torch.full_like(w, 1 / 8))


def test_stack_affine_identity_each_level():
    for layer in make_fusion_stack("affine", [4, 8, 16], 8):
        x = torch.randn(2, layer.channels, 2, 2, 2)
        assert torch.equal(layer(x, torch.randn(2, 8)), x)


@pytest.mark.parametrize("kind,levels", [("affine", [0]), ("cross_attention", [8, -1]), ("film", [4]),
                                         ("affine", [])])
def test_stack_config_errors(kind, levels):
    with pytest.raises(ConfigError):
        make_fusion_stack(kind, levels, 8)
