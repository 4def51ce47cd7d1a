"""Toy anchor-free detector: pyramid backbone, decoupled heads, box decoding,
target assignment, and non-maximum suppression.

The backbone is a stack of stride-2 conv blocks producing features at 1/8,
1/16 and 1/32 of the image.  Each scale gets a decoupled head: one conv
block plus a 1x1 projection for the objectness logit, and a parallel pair
for the per-side bin-distribution logits.  The auxiliary branch hangs off
the 1/8 feature only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .alff import (AlffParams, alff_backward_batched, alff_forward_batched,
                   init_alff, zeros_like_alff)
from .evaluation import Detection, iou
from .geometry import Box
from .losses import BinDistribution, softmax
from .nn import ops
from .nn.conv_block import (ConvBlockParams, conv_block_backward_batched,
                            conv_block_forward_batched, init_conv_block,
                            zeros_like_block)
from . import rng as rngmod

STRIDES = (8, 16, 32)


@dataclass
class ModelSpec:
    """Widths of the toy network; the defaults are the trainable scale, the
    reduced() variant is small enough for finite-difference checking."""

    backbone_ch: tuple = (16, 32, 64, 96, 128)  # strides 2, 4, 8, 16, 32
    head_mid: int = 32
    alff_block_ch: int = 64
    alff_hidden: int = 32
    n_bins: int = 16

    @classmethod
    def reduced(cls) -> "ModelSpec":
        return cls(backbone_ch=(3, 4, 6, 8, 10), head_mid=4,
                   alff_block_ch=6, alff_hidden=3, n_bins=16)


@dataclass
class HeadParams:
    cls_block: ConvBlockParams
    cls_out_k: np.ndarray
    cls_out_b: np.ndarray
    reg_block: ConvBlockParams
    reg_out_k: np.ndarray
    reg_out_b: np.ndarray


@dataclass
class DetectorParams:
    spec: ModelSpec
    backbone: list[ConvBlockParams]
    heads: list[HeadParams]
    alff: AlffParams


@dataclass
class HeadOutput:
    """Per-scale objectness logits (N, 1, h, w) and per-side bin logits
    (N, 4 * n_bins, h, w), for strides 8, 16, 32."""

    cls_logits: list[np.ndarray]
    reg_logits: list[np.ndarray]
    n_bins: int


def init_detector(seed: int, spec: ModelSpec | None = None,
                  dtype=np.float64) -> DetectorParams:
    spec = spec or ModelSpec()
    rng = rngmod.stream(seed, rngmod.INIT)
    chans = (3,) + spec.backbone_ch
    backbone = [init_conv_block(rng, chans[k], chans[k + 1], stride=2, dtype=dtype)
                for k in range(5)]
    heads = []
    for c in spec.backbone_ch[2:]:
        heads.append(HeadParams(
            cls_block=init_conv_block(rng, c, spec.head_mid, dtype=dtype),
            cls_out_k=ops.uniform_init(rng, (1, spec.head_mid, 1, 1), spec.head_mid, dtype),
            cls_out_b=ops.uniform_init(rng, (1,), spec.head_mid, dtype),
            reg_block=init_conv_block(rng, c, spec.head_mid, dtype=dtype),
            reg_out_k=ops.uniform_init(rng, (4 * spec.n_bins, spec.head_mid, 1, 1),
                                       spec.head_mid, dtype),
            reg_out_b=ops.uniform_init(rng, (4 * spec.n_bins,), spec.head_mid, dtype),
        ))
    alff = init_alff(rng, in_ch=spec.backbone_ch[2], block_ch=spec.alff_block_ch,
                     hidden_dim=spec.alff_hidden, dtype=dtype)
    return DetectorParams(spec=spec, backbone=backbone, heads=heads, alff=alff)


def zeros_like_detector(p: DetectorParams) -> DetectorParams:
    heads = [HeadParams(zeros_like_block(h.cls_block), np.zeros_like(h.cls_out_k),
                        np.zeros_like(h.cls_out_b), zeros_like_block(h.reg_block),
                        np.zeros_like(h.reg_out_k), np.zeros_like(h.reg_out_b))
             for h in p.heads]
    return DetectorParams(p.spec, [zeros_like_block(b) for b in p.backbone],
                          heads, zeros_like_alff(p.alff))


def backbone_forward_batched(images: np.ndarray, params: DetectorParams):
    """(N, 3, H, W) image batch -> features at strides 8, 16, 32 + caches."""
    if images.shape[2] % 32 or images.shape[3] % 32:
        raise ops.DimensionError(
            f"image dims {images.shape[2]}x{images.shape[3]} not divisible by 32")
    cur = images
    feats, caches = [], []
    for blk in params.backbone:
        cur, cache = conv_block_forward_batched(cur, blk)
        feats.append(cur)
        caches.append(cache)
    return feats[2:], caches


def backbone_forward(image: np.ndarray, params: DetectorParams):
    feats, _ = backbone_forward_batched(image[None], params)
    return tuple(f[0] for f in feats)


def _head_forward(feat: np.ndarray, hp: HeadParams):
    c_mid, c_cache = conv_block_forward_batched(feat, hp.cls_block)
    cls_logits, c1_cache = ops.conv2d_forward(c_mid, hp.cls_out_k, hp.cls_out_b, 1, 0)
    r_mid, r_cache = conv_block_forward_batched(feat, hp.reg_block)
    reg_logits, r1_cache = ops.conv2d_forward(r_mid, hp.reg_out_k, hp.reg_out_b, 1, 0)
    return cls_logits, reg_logits, (c_cache, c1_cache, r_cache, r1_cache)


def _head_backward(gcls, greg, cache, hp: HeadParams, grads: HeadParams):
    c_cache, c1_cache, r_cache, r1_cache = cache
    gmat, grads.cls_out_k[:], grads.cls_out_b[:] = ops.conv2d_backward(gcls, c1_cache)
    g_mid = ops.conv2d_input_grad(gmat, hp.cls_out_k, c1_cache)
    gfeat, gb = conv_block_backward_batched(g_mid, c_cache, hp.cls_block)
    for name in ("kernels", "bias", "gamma", "beta"):
        getattr(grads.cls_block, name)[:] = getattr(gb, name)
    gmat, grads.reg_out_k[:], grads.reg_out_b[:] = ops.conv2d_backward(greg, r1_cache)
    g_mid = ops.conv2d_input_grad(gmat, hp.reg_out_k, r1_cache)
    gfeat_r, gb = conv_block_backward_batched(g_mid, r_cache, hp.reg_block)
    for name in ("kernels", "bias", "gamma", "beta"):
        getattr(grads.reg_block, name)[:] = getattr(gb, name)
    return gfeat + gfeat_r


def forward_full_batched(images: np.ndarray, params: DetectorParams,
                         enable_alff: bool = True):
    """Main branch on all three scales, auxiliary branch on the 1/8 feature.

    Returns (HeadOutput, heatmap_pred (N, 1, H, W) or None, cache).
    """
    feats, bb_caches = backbone_forward_batched(images, params)
    cls_logits, reg_logits, head_caches = [], [], []
    for feat, hp in zip(feats, params.heads):
        c, r, cache = _head_forward(feat, hp)
        cls_logits.append(c)
        reg_logits.append(r)
        head_caches.append(cache)
    heatmap_pred, alff_cache = None, None
    if enable_alff:
        heatmap_pred, alff_cache = alff_forward_batched(feats[0], params.alff)
    out = HeadOutput(cls_logits, reg_logits, params.spec.n_bins)
    return out, heatmap_pred, (bb_caches, head_caches, alff_cache)


def forward_full(image: np.ndarray, params: DetectorParams, enable_alff: bool = True):
    out, pred, cache = forward_full_batched(image[None], params, enable_alff)
    out1 = HeadOutput([c[0] for c in out.cls_logits],
                      [r[0] for r in out.reg_logits], out.n_bins)
    return out1, (pred[0] if pred is not None else None), cache


def backward_full_batched(gcls: list[np.ndarray], greg: list[np.ndarray],
                          gheat: np.ndarray | None, cache,
                          params: DetectorParams) -> DetectorParams:
    """Adjoint of forward_full_batched; returns parameter gradients."""
    bb_caches, head_caches, alff_cache = cache
    grads = zeros_like_detector(params)
    gfeats = [None, None, None]
    for k in range(3):
        gfeats[k] = _head_backward(gcls[k], greg[k], head_caches[k],
                                   params.heads[k], grads.heads[k])
    if gheat is not None and alff_cache is not None:
        g_alff_in, galff = alff_backward_batched(gheat, alff_cache, params.alff)
        grads.alff = galff
        gfeats[0] = gfeats[0] + g_alff_in
    # chain back through the 5 backbone blocks; blocks 3 and 4 feed the
    # deeper features, whose grads join on the way down
    gcur = gfeats[2]
    for k in (4, 3):
        gx, gb = conv_block_backward_batched(gcur, bb_caches[k], params.backbone[k])
        for name in ("kernels", "bias", "gamma", "beta"):
            getattr(grads.backbone[k], name)[:] = getattr(gb, name)
        gcur = gx + gfeats[k - 3]
    for k in (2, 1, 0):
        gx, gb = conv_block_backward_batched(gcur, bb_caches[k], params.backbone[k],
                                             need_input_grad=k > 0)
        for name in ("kernels", "bias", "gamma", "beta"):
            getattr(grads.backbone[k], name)[:] = getattr(gb, name)
        gcur = gx
    return grads


def decode_offsets(probs: np.ndarray) -> np.ndarray:
    """Expectation over bins: (..., n_bins) probs -> (...) offsets in strides."""
    bins = np.arange(probs.shape[-1], dtype=probs.dtype)
    return probs @ bins


def decode_box(dists, location: tuple[int, int], stride: int) -> Box | None:
    """Decode four side distributions at a grid location to a pixel box.

    Returns None for degenerate (zero-size) boxes, which callers discard.
    """
    l, t, r, b = (float(decode_offsets(d.probs)) * stride for d in dists)
    ax = (location[0] + 0.5) * stride
    ay = (location[1] + 0.5) * stride
    if l + r <= 0 or t + b <= 0:
        return None
    return Box(ax - l, ay - t, ax + r, ay + b)


@dataclass
class ScaleAssignment:
    """Per-scale training targets from ground-truth boxes."""

    cls_target: np.ndarray      # (h, w) of {0, 1}
    pos_iy: np.ndarray          # positive cell rows
    pos_ix: np.ndarray          # positive cell cols
    gt_index: np.ndarray        # ground-truth index per positive
    reg_targets: np.ndarray     # (P, 4) side offsets in stride units
    gt_corners: np.ndarray      # (P, 4) matched ground-truth corners, pixels


def assign_targets(boxes: list[Box], image_size: int,
                   n_bins: int = 16) -> list[ScaleAssignment]:
    """Center-radius assignment: a cell is positive iff its center lies inside
    a box and within 0.5 * min(w, h) of the box center; overlaps resolve to
    the smallest-area box."""
    out = []
    for stride in STRIDES:
        h = w = image_size // stride
        ax = (np.arange(w) + 0.5) * stride
        ay = (np.arange(h) + 0.5) * stride
        gt_idx = np.full((h, w), -1, dtype=int)
        best_area = np.full((h, w), np.inf)
        for j, b in enumerate(boxes):
            inside = ((ax[None, :] >= b.x1) & (ax[None, :] <= b.x2)
                      & (ay[:, None] >= b.y1) & (ay[:, None] <= b.y2))
            radius = 0.5 * min(b.w, b.h)
            d2 = (ax[None, :] - b.cx) ** 2 + (ay[:, None] - b.cy) ** 2
            cand = inside & (d2 <= radius * radius) & (b.area < best_area)
            gt_idx[cand] = j
            best_area[cand] = b.area
        pos_iy, pos_ix = np.nonzero(gt_idx >= 0)
        gt_index = gt_idx[pos_iy, pos_ix]
        reg = np.zeros((len(pos_iy), 4))
        corners = np.zeros((len(pos_iy), 4))
        for k, (iy, ix, j) in enumerate(zip(pos_iy, pos_ix, gt_index)):
            b = boxes[j]
            cx, cy = ax[ix], ay[iy]
            reg[k] = [(cx - b.x1) / stride, (cy - b.y1) / stride,
                      (b.x2 - cx) / stride, (b.y2 - cy) / stride]
            corners[k] = b.corners()
        np.clip(reg, 0.0, n_bins - 1, out=reg)
        cls_target = (gt_idx >= 0).astype(np.float64)
        out.append(ScaleAssignment(cls_target, pos_iy, pos_ix, gt_index, reg, corners))
    return out


def nms(dets: list[Detection], iou_thr: float) -> list[Detection]:
    """Greedy suppression: drop any detection overlapping a kept
    higher-scored one with IoU > iou_thr."""
    order = sorted(range(len(dets)), key=lambda k: (-dets[k].score, k))
    kept: list[Detection] = []
    for k in order:
        if all(iou(dets[k].box, kd.box) <= iou_thr for kd in kept):
            kept.append(dets[k])
    return kept


def postprocess(head: HeadOutput, score_thr: float = 0.25, iou_thr: float = 0.65,
                image_size: int | None = None) -> list[Detection]:
    """Confidence filter + decode + greedy NMS for one image's head output."""
    if not (0.0 <= score_thr <= 1.0 and 0.0 <= iou_thr <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    cand: list[Detection] = []
    for cls_l, reg_l, stride in zip(head.cls_logits, head.reg_logits, STRIDES):
        scores = ops.sigmoid(cls_l[0])
        iy, ix = np.nonzero(scores >= score_thr)
        if len(iy) == 0:
            continue
        n_bins = head.n_bins
        logits = reg_l[:, iy, ix].reshape(4, n_bins, -1).transpose(2, 0, 1)
        probs = softmax(logits, axis=-1)
        offs = decode_offsets(probs) * stride        # (P, 4) l, t, r, b pixels
        axs = (ix + 0.5) * stride
        ays = (iy + 0.5) * stride
        x1 = axs - offs[:, 0]
        y1 = ays - offs[:, 1]
        x2 = axs + offs[:, 2]
        y2 = ays + offs[:, 3]
        if image_size is not None:
            x1 = np.clip(x1, 0, image_size); x2 = np.clip(x2, 0, image_size)
            y1 = np.clip(y1, 0, image_size); y2 = np.clip(y2, 0, image_size)
        for k in range(len(iy)):
            if x2[k] - x1[k] <= 0 or y2[k] - y1[k] <= 0:
                continue
            cand.append(Detection(Box(x1[k], y1[k], x2[k], y2[k]),
                                  float(scores[iy[k], ix[k]])))
    return nms(cand, iou_thr)
