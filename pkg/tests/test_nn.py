import numpy as np
import pytest

from alffdet import rng as rngmod
from alffdet.alff import alff_forward, init_alff
from alffdet.nn import ops
from alffdet.nn.conv_block import conv_block_forward, init_conv_block


def conv2d_naive(x, k, b, stride=1, pad=1):
    """Direct quadruple-loop convolution used only as an oracle."""
    co, ci, kh, kw = k.shape
    _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    y = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                y[o, i, j] = np.sum(patch * k[o]) + b[o]
    return y


class TestConv2d:
    def test_matches_naive_stride1(self):
        rng = rngmod.stream(0, rngmod.GRADCHECK, 80)
        x = rng.standard_normal((3, 7, 7))
        k = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        y, _ = ops.conv2d_forward(x[None], k, b, stride=1, pad=1)
        assert np.allclose(y[0], conv2d_naive(x, k, b), atol=1e-10)

    def test_matches_naive_stride2(self):
        rng = rngmod.stream(0, rngmod.GRADCHECK, 81)
        x = rng.standard_normal((2, 8, 8))
        k = rng.standard_normal((5, 2, 3, 3))
        b = rng.standard_normal(5)
        y, _ = ops.conv2d_forward(x[None], k, b, stride=2, pad=1)
        assert np.allclose(y[0], conv2d_naive(x, k, b, stride=2), atol=1e-10)

    def test_identity_kernel(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        y, _ = ops.conv2d_forward(x, k, np.zeros(1))
        assert np.array_equal(y, x)


class TestChannelNorm:
    def test_zero_mean_unit_var(self):
        rng = rngmod.stream(0, rngmod.GRADCHECK, 82)
        x = rng.standard_normal((2, 3, 6, 6))
        y, _ = ops.channel_norm_forward(x, np.ones(3), np.zeros(3))
        assert np.allclose(y.mean(axis=(2, 3)), 0, atol=1e-10)
        assert np.allclose(y.var(axis=(2, 3)), 1, atol=1e-3)

    def test_affine_applied(self):
        rng = rngmod.stream(0, rngmod.GRADCHECK, 83)
        x = rng.standard_normal((1, 2, 5, 5))
        gamma = np.array([2.0, 0.5])
        beta = np.array([-1.0, 3.0])
        y, _ = ops.channel_norm_forward(x, gamma, beta)
        base, _ = ops.channel_norm_forward(x, np.ones(2), np.zeros(2))
        assert np.allclose(y, base * gamma[None, :, None, None]
                           + beta[None, :, None, None], atol=1e-12)


class TestUpsample:
    def test_nearest_repeats(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        y = ops.upsample_nearest(x, 2)
        assert np.array_equal(y[0, 0], np.array([[1, 1, 2, 2],
                                                 [1, 1, 2, 2],
                                                 [3, 3, 4, 4],
                                                 [3, 3, 4, 4.0]]))

    def test_backward_is_adjoint(self):
        rng = rngmod.stream(0, rngmod.GRADCHECK, 84)
        x = rng.standard_normal((1, 2, 3, 3))
        gy = rng.standard_normal((1, 2, 12, 12))
        lhs = np.sum(ops.upsample_nearest(x, 4) * gy)
        rhs = np.sum(x * ops.upsample_nearest_backward(gy, 4))
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestSilu:
    def test_values(self):
        x = np.array([-2.0, 0.0, 3.0])
        y, _ = ops.silu(x)
        assert np.allclose(y, x / (1 + np.exp(-x)), atol=1e-12)

    def test_sigmoid_extremes_finite(self):
        y = ops.sigmoid(np.array([-1000.0, 1000.0]))
        assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[1] == 1.0


class TestConvBlock:
    def test_output_shape_and_stride(self):
        rng = rngmod.stream(0, rngmod.GRADCHECK, 85)
        p = init_conv_block(rng, 3, 8, stride=2)
        y, _ = conv_block_forward(rng.standard_normal((3, 10, 10)), p)
        assert y.shape == (8, 5, 5)

    def test_is_conv_norm_silu(self):
        rng = rngmod.stream(0, rngmod.GRADCHECK, 86)
        p = init_conv_block(rng, 2, 3)
        x = rng.standard_normal((2, 6, 6))
        y, _ = conv_block_forward(x, p)
        z, _ = ops.conv2d_forward(x[None], p.kernels, p.bias, stride=p.stride)
        n, _ = ops.channel_norm_forward(z, p.gamma, p.beta)
        s, _ = ops.silu(n)
        assert np.allclose(y, s[0], atol=1e-12)


class TestAlff:
    def test_output_shape_and_range(self):
        rng = rngmod.stream(0, rngmod.GRADCHECK, 87)
        p = init_alff(rng, in_ch=4, block_ch=4, hidden_dim=3, up_factor=8)
        x = rng.standard_normal((4, 5, 5))
        y, _ = alff_forward(x, p)
        assert y.shape == (1, 40, 40)
        assert y.min() > 0.0 and y.max() < 1.0

    def test_upsample_blocks_constant(self):
        rng = rngmod.stream(0, rngmod.GRADCHECK, 88)
        p = init_alff(rng, in_ch=2, block_ch=2, hidden_dim=2, up_factor=8)
        x = rng.standard_normal((2, 4, 4))
        y, _ = alff_forward(x, p)
        blocks = y[0].reshape(4, 8, 4, 8)
        assert np.allclose(blocks, blocks[:, :1, :, :1], atol=0)

    def test_location_independence(self):
        # per-location LSTM fusion: changing one input column only moves the
        # prediction above that column
        rng = rngmod.stream(0, rngmod.GRADCHECK, 89)
        p = init_alff(rng, in_ch=2, block_ch=2, hidden_dim=2, up_factor=8)
        x = rng.standard_normal((2, 4, 4))
        y0, _ = alff_forward(x, p)
        x2 = x.copy()
        x2[:, 0, 0] += 10.0
        y1, _ = alff_forward(x2, p)
        changed = np.abs(y1 - y0)[0] > 1e-12
        ys, xs = np.nonzero(changed)
        # 3x3 convs with padding spread influence at most 3 cells before upsample
        assert ys.max() // 8 <= 3 and xs.max() // 8 <= 3


def test_uniform_init_bounds():
    rng = rngmod.stream(0, rngmod.INIT, 1)
    w = ops.uniform_init(rng, (64, 9), 9)
    assert np.abs(w).max() <= 1.0 / 3.0
