"""Conv block: 3x3 convolution + channelwise normalization + SiLU."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops


@dataclass
class ConvBlockParams:
    kernels: np.ndarray          # (out_ch, in_ch, 3, 3)
    bias: np.ndarray             # (out_ch,)
    gamma: np.ndarray            # (out_ch,) normalization scale
    beta: np.ndarray             # (out_ch,) normalization shift
    stride: int = 1
    use_norm: bool = True

    @property
    def in_ch(self) -> int:
        return self.kernels.shape[1]

    @property
    def out_ch(self) -> int:
        return self.kernels.shape[0]


def init_conv_block(rng: np.random.Generator, in_ch: int, out_ch: int,
                    stride: int = 1, use_norm: bool = True, ksize: int = 3,
                    dtype=np.float64) -> ConvBlockParams:
    fan_in = in_ch * ksize * ksize
    return ConvBlockParams(
        kernels=ops.uniform_init(rng, (out_ch, in_ch, ksize, ksize), fan_in, dtype),
        bias=ops.uniform_init(rng, (out_ch,), fan_in, dtype),
        gamma=np.ones(out_ch, dtype),
        beta=np.zeros(out_ch, dtype),
        stride=stride,
        use_norm=use_norm,
    )


def zeros_like_block(p: ConvBlockParams) -> ConvBlockParams:
    return ConvBlockParams(np.zeros_like(p.kernels), np.zeros_like(p.bias),
                           np.zeros_like(p.gamma), np.zeros_like(p.beta),
                           p.stride, p.use_norm)


def conv_block_forward_batched(x: np.ndarray, p: ConvBlockParams):
    """x: (N, C, H, W).  Returns (y, cache)."""
    pad = p.kernels.shape[2] // 2
    z, conv_cache = ops.conv2d_forward(x, p.kernels, p.bias, p.stride, pad)
    if p.use_norm:
        zn, norm_cache = ops.channel_norm_forward(z, p.gamma, p.beta)
    else:
        zn, norm_cache = z, None
    y, s = ops.silu(zn)
    return y, (conv_cache, norm_cache, zn, s)


def conv_block_backward_batched(gy: np.ndarray, cache, p: ConvBlockParams,
                                need_input_grad: bool = True):
    """Returns (gx, grad_params); gx is None when need_input_grad is False."""
    conv_cache, norm_cache, zn, s = cache
    gz = ops.silu_backward(gy, zn, s)
    grads = zeros_like_block(p)
    if p.use_norm:
        gz, grads.gamma[:], grads.beta[:] = ops.channel_norm_backward(gz, p.gamma, norm_cache)
    gy_mat, grads.kernels[:], grads.bias[:] = ops.conv2d_backward(gz, conv_cache)
    gx = None
    if need_input_grad:
        gx = ops.conv2d_input_grad(gy_mat, p.kernels, conv_cache)
    return gx, grads


def conv_block_forward(x: np.ndarray, p: ConvBlockParams):
    """Single-image (C, H, W) view of the batched forward."""
    y, cache = conv_block_forward_batched(x[None], p)
    return y[0], cache


def conv_block_backward(gy: np.ndarray, cache, p: ConvBlockParams):
    gx, grads = conv_block_backward_batched(gy[None], cache, p)
    return gx[0], grads
