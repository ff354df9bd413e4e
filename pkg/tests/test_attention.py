import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from corrseg.attention import (DualFusion, ModalityAttention, SpatialAttention, reduction_size,
                               write_modality_weights)
from corrseg.errors import ShapeMismatchError

from oracles import central_fd_check


def _sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def test_zero_expand_gives_half_weights():
    att = ModalityAttention(4)
    with torch.no_grad():
        att.expand.weight.zero_()
    units = [torch.randn(1, 3, 4, 4, 4) for _ in range(4)]
    recal, w = att(units)
    assert torch.equal(w, torch.full((1, 4), 0.5))
    for r, z in zip(recal, units):
        assert torch.equal(r, 0.5 * z)


def test_pool_of_constant_map():
    att = ModalityAttention(4)
    g_seen = {}

    def grab(module, inp, out):
        g_seen["g"] = inp[0]

    att.squeeze.register_forward_hook(grab)
    units = [torch.full((1, 2, 3, 3, 3), c) for c in (1.5, -2.0, 0.0, 7.0)]
    att(units)
    torch.testing.assert_close(g_seen["g"], torch.tensor([[1.5, -2.0, 0.0, 7.0]]))


def test_modality_attention_hand_case(double_precision):
    att = ModalityAttention(4)
    w2 = torch.tensor([[1.0, 2.0, 3.0, 4.0], [-1.0, 0.5, 0.0, 0.0]])
    w1 = torch.tensor([[0.5, 1.0], [-1.0, 2.0], [2.0, 0.0], [0.0, 0.0]])
    with torch.no_grad():
        att.squeeze.weight.copy_(w2)
        att.expand.weight.copy_(w1)
    units = [torch.full((1, 1, 2, 2, 2), v) for v in (1.0, 0.0, 0.0, 0.0)]
    _, w = att(units)
    # W2 g = (1, -1); relu -> (1, 0); W1 (1, 0) = (0.5, -1, 2, 0)
    expected = [_sigmoid(v) for v in (0.5, -1.0, 2.0, 0.0)]
    np.testing.assert_allclose(w[0].detach().numpy(), expected, atol=1e-12)
    np.testing.assert_allclose(expected, [0.6224593, 0.2689414, 0.8807971, 0.5], atol=1e-7)


def test_modality_attention_shape_mismatch():
    att = ModalityAttention(2)
    with pytest.raises(ShapeMismatchError):
        att([torch.randn(1, 1, 4, 4, 4), torch.randn(1, 1, 4, 4, 3)])
    with pytest.raises(ShapeMismatchError):
        att([torch.randn(1, 1, 4, 4, 4)] * 3)


def test_spatial_zero_weights():
    sa = SpatialAttention(3)
    with torch.no_grad():
        sa.proj.weight.zero_()
        sa.proj.bias.zero_()
    z = torch.randn(2, 3, 4, 4, 4)
    zs, m = sa(z)
    assert torch.equal(m, torch.full((2, 4, 4, 4), 0.5))
    assert torch.equal(zs, 0.5 * z)


def test_spatial_single_voxel_hand_case(double_precision):
    sa = SpatialAttention(2)
    with torch.no_grad():
        sa.proj.weight.copy_(torch.ones(1, 2, 1, 1, 1))
        sa.proj.bias.zero_()
    z = torch.tensor([1.0, 2.0]).view(1, 2, 1, 1, 1)
    zs, m = sa(z)
    s3 = _sigmoid(3.0)
    assert abs(m.item() - s3) < 1e-12
    np.testing.assert_allclose(zs.view(-1).detach().numpy(), [s3, 2 * s3], atol=1e-12)
    np.testing.assert_allclose([s3, 2 * s3], [0.95257, 1.90515], atol=1e-5)


def test_spatial_channel_mismatch():
    with pytest.raises(ShapeMismatchError):
        SpatialAttention(3)(torch.randn(1, 2, 4, 4, 4))


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.integers(0, 10_000))
def test_weights_in_open_unit_interval(scale, seed):
    # 64-bit: sigmoid only saturates to exactly 0/1 beyond |x| ~ 37
    torch.manual_seed(seed)
    fusion = DualFusion(4, 2).double()
    units = [scale * torch.randn(1, 2, 3, 3, 3, dtype=torch.float64) for _ in range(4)]
    _, w = fusion.modality(units)
    _, m = fusion.spatial(torch.cat(units, 1))
    assert ((w > 0) & (w < 1)).all()
    assert ((m > 0) & (m < 1)).all()


def test_dual_fusion_zeroed_is_identity():
    fusion = DualFusion(4, 3)
    with torch.no_grad():
        fusion.modality.expand.weight.zero_()
        fusion.spatial.proj.weight.zero_()
        fusion.spatial.proj.bias.zero_()
    units = [torch.randn(1, 3, 4, 4, 4) for _ in range(4)]
    out = fusion(units)
    assert torch.equal(out, torch.cat(units, 1))


def test_fusion_dimensions():
    bottom, level = DualFusion(4, 64), DualFusion(5, 8)
    assert tuple(bottom.modality.squeeze.weight.shape) == (2, 4)
    assert tuple(bottom.modality.expand.weight.shape) == (4, 2)
    assert tuple(level.modality.squeeze.weight.shape) == (2, 5)
    assert tuple(level.modality.expand.weight.shape) == (5, 2)
    assert reduction_size(1) == 1 and reduction_size(5) == 2
    out = level([torch.randn(1, 8, 2, 2, 2)] * 5)
    assert out.shape == (1, 40, 2, 2, 2)


def test_permutation_equivariance(double_precision):
    torch.manual_seed(4)
    K, c = 4, 2
    fusion = DualFusion(K, c)
    units = [torch.randn(1, c, 3, 3, 3) for _ in range(K)]
    perm = [2, 0, 3, 1]
    permuted = DualFusion(K, c)
    with torch.no_grad():
        permuted.modality.squeeze.weight.copy_(fusion.modality.squeeze.weight[:, perm])
        permuted.modality.expand.weight.copy_(fusion.modality.expand.weight[perm, :])
        ws = fusion.spatial.proj.weight.view(K, c)
        permuted.spatial.proj.weight.copy_(ws[perm].reshape(1, K * c, 1, 1, 1))
        permuted.spatial.proj.bias.copy_(fusion.spatial.proj.bias)
    zm, w = fusion.modality(units)
    zm_p, w_p = permuted.modality([units[p] for p in perm])
    torch.testing.assert_close(w_p, w[:, perm])
    for k, p in enumerate(perm):
        torch.testing.assert_close(zm_p[k], zm[p])
    _, m = fusion.spatial(torch.cat(units, 1))
    _, m_p = permuted.spatial(torch.cat([units[p] for p in perm], 1))
    torch.testing.assert_close(m_p, m)


def test_identical_units_equal_weights():
    att = ModalityAttention(4)
    with torch.no_grad():
        att.squeeze.weight.fill_(0.3)
        att.expand.weight.fill_(-0.7)
    z = torch.randn(1, 2, 3, 3, 3)
    _, w = att([z] * 4)
    assert torch.all(w == w[0, 0])


def test_gradcheck_modality_attention(double_precision):
    torch.manual_seed(0)
    att = ModalityAttention(4)
    units = [torch.randn(1, 2, 2, 2, 2, requires_grad=True) for _ in range(4)]
    # keep the hidden ReLU away from its kink
    with torch.no_grad():
        att.squeeze.weight.copy_(torch.tensor([[0.9, 0.4, -0.3, 0.2], [0.5, -0.6, 0.7, 0.1]]))
        for u, off in zip(units, (2.0, 1.0, -1.0, 0.5)):
            u.add_(off)
    err = central_fd_check(lambda: torch.cat(att(units)[0], 1), units + list(att.parameters()))
    assert err < 1e-3


def test_gradcheck_spatial_attention(double_precision):
    torch.manual_seed(1)
    sa = SpatialAttention(4)
    z = torch.randn(1, 4, 2, 2, 2, requires_grad=True)
    assert central_fd_check(lambda: sa(z)[0], [z] + list(sa.parameters())) < 1e-3


def test_gradcheck_dual_fusion(double_precision):
    torch.manual_seed(2)
    fusion = DualFusion(5, 1)
    units = [torch.randn(1, 1, 2, 2, 2, requires_grad=True) for _ in range(5)]
    with torch.no_grad():
        fusion.modality.squeeze.weight.copy_(torch.tensor([[0.9, 0.4, -0.3, 0.2, 0.3],
                                                           [0.5, -0.6, 0.7, 0.1, -0.2]]))
        for u, off in zip(units, (2.0, 1.0, -1.0, 0.5, 1.5)):
            u.add_(off)
    assert central_fd_check(lambda: fusion(units), units + list(fusion.parameters())) < 1e-3


def test_weights_csv(tmp_path):
    write_modality_weights(tmp_path / "w.csv", {3: torch.tensor([[0.25, 0.75]]),
                                                0: torch.tensor([0.5, 0.5, 0.1])})
    lines = (tmp_path / "w.csv").read_text().splitlines()
    assert lines[0] == "level,unit,weight"
    assert lines[1] == "0,0,0.500000"
    assert lines[-1] == "3,1,0.750000"
