"""Batched NCHW array primitives with hand-written backward passes.

Convolution goes through im2col so the inner loop is a single GEMM; the
col2im scatter in the backward pass is unrolled over the 9 kernel taps to
stay vectorized.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    pass


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow either side
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def silu(x: np.ndarray):
    s = sigmoid(x)
    return x * s, s


def silu_backward(gy: np.ndarray, x: np.ndarray, s: np.ndarray) -> np.ndarray:
    return gy * s * (1.0 + x * (1.0 - s))


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) padded input -> (N, C*kh*kw, ho*wo) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def conv2d_forward(x: np.ndarray, k: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 1):
    """3x3 (or any) convolution; returns (y, cache) with y (N, Co, ho, wo)."""
    n, c, h, w = x.shape
    co, ci, kh, kw = k.shape
    if ci != c:
        raise DimensionError(f"conv expects {ci} input channels, got {c}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"input {h}x{w} too small for {kh}x{kw} kernel")
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x
    cols = im2col(xp, kh, kw, stride, ho, wo)
    kmat = k.reshape(co, ci * kh * kw)
    y = kmat @ cols + b[:, None]
    cache = (cols, x.shape, k.shape, stride, pad, ho, wo)
    return y.reshape(n, co, ho, wo), cache


def conv2d_backward(gy: np.ndarray, cache):
    cols, xshape, kshape, stride, pad, ho, wo = cache
    n, c, h, w = xshape
    co, ci, kh, kw = kshape
    gy_mat = gy.reshape(n, co, ho * wo)
    gk = np.einsum("nol,nkl->ok", gy_mat, cols, optimize=True).reshape(kshape)
    gb = gy_mat.sum(axis=(0, 2))
    return gy_mat, gk, gb


def conv2d_input_grad(gy_mat: np.ndarray, k: np.ndarray, cache) -> np.ndarray:
    cols, xshape, kshape, stride, pad, ho, wo = cache
    n, c, h, w = xshape
    co, ci, kh, kw = kshape
    kmat = k.reshape(co, ci * kh * kw)
    gcols = (kmat.T @ gy_mat).reshape(n, ci, kh, kw, ho, wo)
    gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=gy_mat.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
    if pad:
        return gxp[:, :, pad : pad + h, pad : pad + w]
    return gxp


def channel_norm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Per-image, per-channel normalization over spatial positions."""
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    y = gamma[:, None, None] * xhat + beta[:, None, None]
    return y, (xhat, inv_std)


def channel_norm_backward(gy: np.ndarray, gamma: np.ndarray, cache):
    xhat, inv_std = cache
    m = xhat.shape[2] * xhat.shape[3]
    ggamma = (gy * xhat).sum(axis=(0, 2, 3))
    gbeta = gy.sum(axis=(0, 2, 3))
    gxhat = gy * gamma[:, None, None]
    s1 = gxhat.sum(axis=(2, 3), keepdims=True)
    s2 = (gxhat * xhat).sum(axis=(2, 3), keepdims=True)
    gx = inv_std * (gxhat - s1 / m - xhat * s2 / m)
    return gx, ggamma, gbeta


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)


def upsample_nearest_backward(gy: np.ndarray, factor: int) -> np.ndarray:
    n, c, hf, wf = gy.shape
    h, w = hf // factor, wf // factor
    return gy.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=shape).astype(dtype)
