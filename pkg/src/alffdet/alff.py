"""Auxiliary feature-fusion branch.

Three conv blocks refine the stride-8 shared feature; at every spatial
location the three block outputs form a length-3 sequence driven through a
weight-shared LSTM, whose three hidden states are concatenated, reduced to
one channel by a per-location linear map, squashed by a sigmoid and
nearest-neighbor upsampled back to image resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ops
from .nn.conv_block import (ConvBlockParams, conv_block_backward_batched,
                            conv_block_forward_batched, init_conv_block,
                            zeros_like_block)
from .nn.lstm import (LstmWeights, init_lstm, lstm_sequence_backward,
                      lstm_sequence_forward, zeros_like_weights)


@dataclass
class AlffParams:
    blocks: list[ConvBlockParams]     # 3 blocks, equal out_ch
    lstm: LstmWeights                 # input_dim == conv out_ch
    fc_w: np.ndarray                  # (1, 3 * hidden_dim)
    fc_b: np.ndarray                  # (1,)
    up_factor: int = 8


def init_alff(rng: np.random.Generator, in_ch: int = 64, block_ch: int = 64,
              hidden_dim: int = 32, up_factor: int = 8, dtype=np.float64) -> AlffParams:
    blocks = [
        init_conv_block(rng, in_ch, block_ch, dtype=dtype),
        init_conv_block(rng, block_ch, block_ch, dtype=dtype),
        init_conv_block(rng, block_ch, block_ch, dtype=dtype),
    ]
    lstm = init_lstm(rng, block_ch, hidden_dim, dtype=dtype)
    fc_w = ops.uniform_init(rng, (1, 3 * hidden_dim), 3 * hidden_dim, dtype)
    fc_b = ops.uniform_init(rng, (1,), 3 * hidden_dim, dtype)
    return AlffParams(blocks, lstm, fc_w, fc_b, up_factor)


def zeros_like_alff(p: AlffParams) -> AlffParams:
    return AlffParams([zeros_like_block(b) for b in p.blocks],
                      zeros_like_weights(p.lstm),
                      np.zeros_like(p.fc_w), np.zeros_like(p.fc_b), p.up_factor)


def alff_forward_batched(x: np.ndarray, p: AlffParams):
    """x: (N, C, H, W) shared feature -> (N, 1, H*f, W*f) heatmap prediction."""
    n, _, h, w = x.shape
    feats, block_caches = [], []
    cur = x
    for blk in p.blocks:
        cur, cache = conv_block_forward_batched(cur, blk)
        feats.append(cur)
        block_caches.append(cache)
    c = feats[0].shape[1]
    # fold batch and spatial dims into one column axis for the shared LSTM
    cols = [f.reshape(n, c, h * w).transpose(1, 0, 2).reshape(c, n * h * w)
            for f in feats]
    hs, lstm_caches = lstm_sequence_forward(cols, p.lstm)
    cat = np.concatenate(hs, axis=0)                     # (3*hidden, n*h*w)
    z = p.fc_w @ cat + p.fc_b[:, None]                   # (1, n*h*w)
    s = ops.sigmoid(z)
    pre = s.reshape(1, n, h, w).transpose(1, 0, 2, 3)
    y = ops.upsample_nearest(pre, p.up_factor)
    cache = (block_caches, lstm_caches, cat, s, (n, c, h, w))
    return y, cache


def alff_backward_batched(gy: np.ndarray, cache, p: AlffParams,
                          need_input_grad: bool = True):
    """Returns (gx, grad_params)."""
    block_caches, lstm_caches, cat, s, (n, c, h, w) = cache
    grads = zeros_like_alff(p)
    gpre = ops.upsample_nearest_backward(gy, p.up_factor)
    gs = gpre.transpose(1, 0, 2, 3).reshape(1, n * h * w)
    gz = gs * s * (1.0 - s)
    grads.fc_w[:] = gz @ cat.T
    grads.fc_b[:] = gz.sum(axis=1)
    gcat = p.fc_w.T @ gz
    hd = p.lstm.hidden_dim
    grad_hs = [gcat[t * hd : (t + 1) * hd] for t in range(3)]
    gcols, grads_lstm = lstm_sequence_backward(grad_hs, lstm_caches, p.lstm)
    for name, arr in grads.lstm.field_arrays():
        arr += getattr(grads_lstm, name)
    # unfold column grads back to (N, C, H, W) feature grads
    gfeats = [g.reshape(c, n, h * w).transpose(1, 0, 2).reshape(n, c, h, w)
              for g in gcols]
    gcur = gfeats[2]
    for t in (2, 1, 0):
        need = need_input_grad or t > 0
        gx_blk, gb = conv_block_backward_batched(gcur, block_caches[t], p.blocks[t],
                                                 need_input_grad=need)
        for name in ("kernels", "bias", "gamma", "beta"):
            getattr(grads.blocks[t], name)[:] = getattr(gb, name)
        if t > 0:
            gcur = gx_blk + gfeats[t - 1]
        else:
            gcur = gx_blk
    return gcur, grads


def alff_forward(shared_feature: np.ndarray, p: AlffParams):
    """Single-image (C, H, W) -> (1, H*f, W*f); returns (heatmap_pred, cache)."""
    y, cache = alff_forward_batched(shared_feature[None], p)
    return y[0], cache


def alff_backward(grad_pred: np.ndarray, cache, p: AlffParams):
    gx, grads = alff_backward_batched(grad_pred[None], cache, p)
    return gx[0], grads
