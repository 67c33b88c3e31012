import math

import numpy as np
import pytest

from wnet import tensor as T
from wnet.gradcheck import buffer_snapshot, check_module
from wnet.layers import (RCAB, SCAB, AttentionUnitSpec, ChannelAttention, DownsampleBlock, Hourglass,
                         MultiHeadSelfAttention, PixelAttention, ResidualBlock, ScabSpec, SpatialAttention,
                         UpsampleBlock)
from wnet.nn import Init, zero_init
from wnet.tensor import ShapeError, Tensor

from conftest import naive_conv2d


def sigmoid(z):
    return 1 / (1 + np.exp(-z))


def x_of(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def block_check(block, shape, seed=0, tol=1e-5):
    x = Tensor(x_of(shape, seed), requires_grad=True)
    undo = buffer_snapshot(block)
    w = np.random.default_rng(seed + 1).standard_normal(block(x).shape)
    undo()

    def loss():
        return T.tsum(block(x) * w)

    r = check_module(block, loss, h=1e-6, samples=16, seed=seed, extra={"input": x})
    assert r.max_rel_error < tol, r
    return r


def test_attention_spec_validation():
    with pytest.raises(ValueError):
        AttentionUnitSpec("temporal")
    with pytest.raises(ValueError):
        AttentionUnitSpec("spatial", kernel=6)
    with pytest.raises(ValueError):
        ScabSpec(channels=10, heads=4)


# -- residual block / hourglass ------------------------------------------------------

def test_residual_zero_init_identity():
    blk = zero_init(ResidualBlock(8, Init(0)))
    x = x_of((2, 8, 6, 6)).astype(np.float32)
    assert np.array_equal(blk(Tensor(x)).data, x)


def test_residual_shape_and_channel_error():
    blk = ResidualBlock(8, Init(0))
    assert blk(Tensor(np.zeros((2, 8, 16, 16)))).shape == (2, 8, 16, 16)
    with pytest.raises(ShapeError):
        blk(Tensor(np.zeros((1, 4, 4, 4))))


def test_residual_gradcheck(f64):
    block_check(ResidualBlock(4, Init(1)), (1, 4, 5, 5))


def test_hourglass_shape_and_divisibility():
    hg = Hourglass(4, 4, Init(0))
    assert hg(Tensor(np.zeros((1, 4, 32, 32)))).shape == (1, 4, 32, 32)
    with pytest.raises(ShapeError, match="16"):
        hg(Tensor(np.zeros((1, 4, 24, 24))))


def test_hourglass_depth0_is_one_residual_block():
    hg = Hourglass(4, 0, Init(3))
    rb = ResidualBlock(4, Init(3))
    x = Tensor(x_of((1, 4, 4, 4)).astype(np.float32))
    assert list(dict(hg.named_parameters())) == ["base." + k for k in dict(rb.named_parameters())]
    assert np.array_equal(hg(x).data, rb(x).data)


@pytest.mark.parametrize("depth", [1, 2, 3])
def test_hourglass_zero_init_counts_identity_paths(depth):
    hg = zero_init(Hourglass(4, depth, Init(0)))
    b = 2 ** depth
    coarse = x_of((1, 4, 2, 2), depth)
    x = np.kron(coarse, np.ones((1, 1, b, b)))  # block-constant, so max pooling is exact
    np.testing.assert_allclose(hg(Tensor(x, dtype=np.float64)).data, (depth + 1) * x, rtol=1e-12)


def test_hourglass_gradcheck(f64):
    block_check(Hourglass(3, 2, Init(2)), (1, 3, 8, 8))


# -- attention units ------------------------------------------------------------------

def test_channel_attention_zero_weights_half():
    ca = zero_init(ChannelAttention(16, Init(0)))
    x = x_of((1, 16, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(ca(Tensor(x)).data, 0.5 * x)


def test_channel_attention_oracle(f64):
    ca = ChannelAttention(16, Init(4))
    x = x_of((1, 16, 4, 4), 4)
    w1, b1 = ca.squeeze.weight.data[:, :, 0, 0], ca.squeeze.bias.data
    w2, b2 = ca.excite.weight.data[:, :, 0, 0], ca.excite.bias.data
    pooled = x[0].mean(axis=(1, 2))
    gate = sigmoid(w2 @ np.maximum(w1 @ pooled + b1, 0) + b2)
    np.testing.assert_allclose(ca(Tensor(x)).data[0], gate[:, None, None] * x[0], rtol=1e-6)


def test_channel_attention_reduction_errors():
    with pytest.raises(ValueError):
        ChannelAttention(8, Init(0), reduction=16)


def test_spatial_attention_zero_weights_half():
    sa = zero_init(SpatialAttention(Init(0)))
    x = x_of((2, 3, 5, 5)).astype(np.float32)
    np.testing.assert_array_equal(sa(Tensor(x)).data, 0.5 * x)


def test_spatial_attention_single_channel_mean_equals_max():
    x = Tensor(x_of((1, 1, 4, 4)))
    np.testing.assert_array_equal(T.channel_mean(x).data, T.channel_max(x).data)


def test_spatial_attention_oracle(f64):
    sa = SpatialAttention(Init(5))
    x = x_of((2, 5, 9, 9), 5)
    maps = np.concatenate([x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)], axis=1)
    gate = sigmoid(naive_conv2d(maps, sa.conv.weight.data, sa.conv.bias.data, 1, 3))
    np.testing.assert_allclose(sa(Tensor(x)).data, gate * x, rtol=1e-6)


def test_gates_in_open_unit_interval_and_outputs_bounded(f64):
    x = Tensor(x_of((2, 16, 6, 6), 6) * 5)
    for unit in (ChannelAttention(16, Init(6)), SpatialAttention(Init(6))):
        g = unit.gate(x).data
        assert np.all((g > 0) & (g < 1))
        assert np.all(np.abs(unit(x).data) <= np.abs(x.data))
    sigma = PixelAttention(16, Init(6))(x)
    assert sigma.shape == (2, 1, 6, 6) and np.all((sigma.data > 0) & (sigma.data < 1))


def test_pixel_attention_zero_weights():
    pa = zero_init(PixelAttention(7, Init(0)))
    out = pa(Tensor(x_of((3, 7, 2, 5))))
    assert out.shape == (3, 1, 2, 5) and np.all(out.data == 0.5)


@pytest.mark.parametrize("make,shape", [
    (lambda: ChannelAttention(8, Init(7), reduction=4), (2, 8, 4, 4)),
    (lambda: SpatialAttention(Init(7)), (2, 3, 5, 5)),
    (lambda: PixelAttention(3, Init(7)), (2, 3, 4, 4)),
], ids=["channel", "spatial", "pixel"])
def test_attention_gradcheck(make, shape, f64):
    block_check(make(), shape)


# -- resize blocks ------------------------------------------------------------------------

def test_up_down_shapes():
    assert UpsampleBlock(8, Init(0))(Tensor(np.ones((1, 8, 8, 8)))).shape == (1, 8, 16, 16)
    assert DownsampleBlock(8, Init(0))(Tensor(np.ones((1, 8, 16, 16)))).shape == (1, 8, 8, 8)


def test_down_rejects_odd():
    with pytest.raises(ShapeError):
        DownsampleBlock(4, Init(0))(Tensor(np.ones((1, 4, 5, 4))))


@pytest.mark.parametrize("cls,shape", [(UpsampleBlock, (2, 4, 3, 3)), (DownsampleBlock, (2, 4, 6, 6))])
def test_resize_gradcheck(cls, shape, f64):
    blk = cls(4, Init(8))
    block_check(blk, shape)
    assert np.all(blk.bn.running_var == 1.0), "gradcheck must not leak running-stat updates"


# -- mhsa --------------------------------------------------------------------------------

def mhsa_oracle(m: MultiHeadSelfAttention, x):
    """Explicit per-head, per-query loop over the dense attention definition."""
    def proj(dw, pw):
        c = x.shape[1]
        b = dw.bias.data if dw.bias is not None else np.zeros(c)
        d = np.concatenate([naive_conv2d(x[:, i:i + 1], dw.weight.data[i:i + 1], b[i:i + 1], 1, 1)
                            for i in range(c)], axis=1)
        pb = pw.bias.data if pw.bias is not None else None
        return naive_conv2d(d, pw.weight.data, pb, 1, 0)

    q, k, v = proj(m.q_dw, m.q_pw), proj(m.k_dw, m.k_pw), proj(m.v_dw, m.v_pw)
    n, c, h, w = x.shape
    d = c // m.heads
    out = np.zeros_like(x)
    for b in range(n):
        for head in range(m.heads):
            sl = slice(head * d, (head + 1) * d)
            qs, ks, vs = (t[b, sl].reshape(d, h * w) for t in (q, k, v))
            for i in range(h * w):
                scores = np.array([qs[:, i] @ ks[:, j] for j in range(h * w)]) / math.sqrt(d)
                a = np.exp(scores - scores.max())
                a /= a.sum()
                out[b, sl].reshape(d, h * w)[:, i] = vs @ a
    return out


@pytest.mark.parametrize("case", range(20))
def test_mhsa_matches_loop_oracle(case, f64):
    rng = np.random.default_rng(300 + case)
    c = int(rng.choice([4, 8]))
    m = MultiHeadSelfAttention(c, Init(case), heads=4)
    x = rng.standard_normal((int(rng.integers(1, 3)), c, int(rng.integers(1, 4)), int(rng.integers(1, 4))))
    np.testing.assert_allclose(m(Tensor(x)).data, mhsa_oracle(m, x), rtol=1e-5, atol=1e-10)


def test_mhsa_single_position_returns_v(f64):
    m = MultiHeadSelfAttention(8, Init(9))
    x = Tensor(x_of((2, 8, 1, 1), 9))
    np.testing.assert_allclose(m(x).data, m.qkv(x)[2].data, rtol=1e-12)


def test_mhsa_constant_v_gives_constant_output(f64):
    m = MultiHeadSelfAttention(8, Init(10))
    m.v_dw.weight.data[...] = 0
    x = Tensor(x_of((1, 8, 4, 4), 10))
    out = m(x).data
    np.testing.assert_allclose(out, np.broadcast_to(out[:, :, :1, :1], out.shape), rtol=1e-10)


def test_mhsa_divisibility():
    with pytest.raises(ValueError):
        MultiHeadSelfAttention(6, Init(0), heads=4)


def test_mhsa_gradcheck(f64):
    block_check(MultiHeadSelfAttention(4, Init(11), heads=2), (1, 4, 3, 3))


# -- RCAB / SCAB --------------------------------------------------------------------------

def test_rcab_zero_init_identity():
    blk = zero_init(RCAB(16, Init(0)))
    x = x_of((2, 16, 4, 4)).astype(np.float32)
    assert np.array_equal(blk(Tensor(x)).data, x)


def test_scab_shape_and_ablation():
    x = Tensor(x_of((2, 16, 8, 8)).astype(np.float32))
    full, plain = SCAB(ScabSpec(16, 4, 16), Init(0)), SCAB(ScabSpec(16, 4, 16), Init(0), attention=False)
    assert full(x).shape == plain(x).shape == (2, 16, 8, 8)
    assert plain.mhsa is None and not any("mhsa" in k for k, _ in plain.named_parameters())


def test_scab_is_rcab_plus_residual_attention(f64):
    blk = SCAB(ScabSpec(8, 4, 4), Init(12))
    x = Tensor(x_of((1, 8, 4, 4), 12))
    r = blk.rcab(x)
    np.testing.assert_allclose(blk(x).data, r.data + blk.mhsa(r).data, rtol=1e-12)


@pytest.mark.parametrize("attention", [True, False])
def test_scab_gradcheck(attention, f64):
    block_check(SCAB(ScabSpec(8, 4, 4), Init(13), attention=attention), (1, 8, 4, 4))


def test_block_shape_walk():
    """Static shape propagation agrees with the real forward for every block."""
    cases = [
        (ResidualBlock(8, Init(0)), (2, 8, 16, 16)),
        (Hourglass(8, 2, Init(0)), (1, 8, 8, 8)),
        (ChannelAttention(16, Init(0)), (1, 16, 4, 4)),
        (SpatialAttention(Init(0)), (1, 5, 4, 4)),
        (PixelAttention(5, Init(0)), (1, 5, 4, 4)),
        (UpsampleBlock(8, Init(0)), (1, 8, 4, 4)),
        (DownsampleBlock(8, Init(0)), (1, 8, 4, 4)),
        (MultiHeadSelfAttention(8, Init(0)), (1, 8, 3, 3)),
        (RCAB(16, Init(0)), (2, 16, 4, 4)),
        (SCAB(ScabSpec(16, 4, 16), Init(0)), (2, 16, 4, 4)),
    ]
    for block, shape in cases:
        assert block.output_shape(shape) == block(Tensor(np.ones(shape))).shape, type(block).__name__
