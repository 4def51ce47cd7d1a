"""Training losses.

The box-side regression treats each offset as a discrete distribution over
integer bins; its loss penalizes the two bins bracketing the continuous
target.  Noise calibration multiplicatively perturbs the target with scaled
half-normal noise before the bracketing, either inflating (hard data) or
deflating (easy data) it.  The auxiliary heatmap branch trains with plain
mean squared error, and classification with binary cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod

N_BINS = 16
LOG_FLOOR = 1e-12


class LossError(ValueError):
    pass


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class BinDistribution:
    """Discrete probability vector over integer offset bins for one box side."""

    logits: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        if self.probs.shape != self.logits.shape or self.probs.ndim != 1:
            raise LossError("logits/probs must be matching vectors")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise LossError("probs must be a normalized distribution")

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "BinDistribution":
        logits = np.asarray(logits, dtype=np.float64)
        return cls(logits=logits, probs=softmax(logits))

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "BinDistribution":
        probs = np.asarray(probs, dtype=np.float64)
        return cls(logits=np.log(np.maximum(probs, LOG_FLOOR)), probs=probs)

    @property
    def n_bins(self) -> int:
        return self.probs.shape[0]


@dataclass
class NoiseConfig:
    alpha: float = 1.0
    mu: float = 0.0
    sigma_n: float = 1.0
    mode: str = "inflate"
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.sigma_n < 0 or not np.isfinite(self.mu):
            raise LossError("invalid noise config")
        if self.mode not in ("inflate", "deflate"):
            raise LossError(f"unknown noise mode {self.mode!r}")


@dataclass
class LossWeights:
    w_box: float = 1.0
    w_cls: float = 0.5
    w_dfl: float = 1.5
    w_aux: float = 1.0

    def __post_init__(self):
        vals = (self.w_box, self.w_cls, self.w_dfl, self.w_aux)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise LossError("loss weights must be finite and non-negative")
        if all(v == 0 for v in vals):
            raise LossError("at least one loss weight must be positive")


def bracket(y: float | np.ndarray, n_bins: int):
    """Lower neighbor bin index and the (left, right) interpolation weights.

    A target sitting exactly on the upper edge uses (n_bins-2, n_bins-1).
    """
    yi = np.minimum(np.floor(y), n_bins - 2).astype(int)
    return yi, (yi + 1.0 - y), (y - yi)


def dfl(dist: BinDistribution, y: float) -> float:
    """Loss for one side: weighted negative log of the two bracketing bins."""
    if not (0.0 <= y <= dist.n_bins - 1):
        raise LossError(f"target {y} outside [0, {dist.n_bins - 1}]")
    yi, wl, wr = bracket(y, dist.n_bins)
    log_p = np.log(np.maximum(dist.probs, LOG_FLOOR))
    return float(-(wl * log_p[yi] + wr * log_p[yi + 1]))


def dfl_grad_logits(dist: BinDistribution, y: float) -> np.ndarray:
    """Gradient of dfl w.r.t. the distribution logits."""
    if not (0.0 <= y <= dist.n_bins - 1):
        raise LossError(f"target {y} outside [0, {dist.n_bins - 1}]")
    yi, wl, wr = bracket(y, dist.n_bins)
    gp = np.zeros_like(dist.probs)
    if dist.probs[yi] > LOG_FLOOR:
        gp[yi] = -wl / dist.probs[yi]
    if dist.probs[yi + 1] > LOG_FLOOR:
        gp[yi + 1] = -wr / dist.probs[yi + 1]
    return dist.probs * (gp - np.dot(gp, dist.probs))


def dfl_batch(probs: np.ndarray, y: np.ndarray):
    """Vectorized loss and logit gradient over rows of (M, n_bins) probs."""
    m, n_bins = probs.shape
    yi, wl, wr = bracket(y, n_bins)
    rows = np.arange(m)
    p_l = probs[rows, yi]
    p_r = probs[rows, yi + 1]
    losses = -(wl * np.log(np.maximum(p_l, LOG_FLOOR))
               + wr * np.log(np.maximum(p_r, LOG_FLOOR)))
    gp = np.zeros_like(probs)
    gp[rows, yi] = np.where(p_l > LOG_FLOOR, -wl / np.maximum(p_l, LOG_FLOOR), 0.0)
    gp[rows, yi + 1] = np.where(p_r > LOG_FLOOR, -wr / np.maximum(p_r, LOG_FLOOR), 0.0)
    glogits = probs * (gp - (gp * probs).sum(axis=1, keepdims=True))
    return losses, glogits


def noise_calibrate(y: float | np.ndarray, cfg: NoiseConfig,
                    xi: float | np.ndarray, n_bins: int = N_BINS):
    """Multiplicative half-normal perturbation of the target, clamped in range."""
    factor = cfg.alpha * (cfg.mu + cfg.sigma_n * np.abs(xi))
    if cfg.mode == "inflate":
        y_g = y * (1.0 + factor)
    else:
        y_g = y * (1.0 - factor)
    return np.clip(y_g, 0.0, n_bins - 1)


def nc_dfl(dist: BinDistribution, y: float, cfg: NoiseConfig,
           draw_index: int = 0) -> float:
    """Noise-calibrated dfl: the bracketing neighbors are recomputed around
    the perturbed target.  With alpha = 0 this is bit-identical to dfl."""
    if cfg.alpha == 0.0:
        return dfl(dist, y)
    xi = float(rngmod.stream(cfg.seed, rngmod.NOISE, draw_index).standard_normal())
    y_g = float(noise_calibrate(y, cfg, xi, dist.n_bins))
    return dfl(dist, y_g)


def heatmap_loss(pred: np.ndarray, target) -> float:
    """Mean squared error over all heatmap cells."""
    tgrid = getattr(target, "grid", target)
    if pred.shape != tgrid.shape:
        raise LossError(f"heatmap shape mismatch: {pred.shape} vs {tgrid.shape}")
    diff = pred - tgrid
    return float(np.mean(diff * diff))


def heatmap_loss_grad(pred: np.ndarray, target) -> np.ndarray:
    tgrid = getattr(target, "grid", target)
    if pred.shape != tgrid.shape:
        raise LossError(f"heatmap shape mismatch: {pred.shape} vs {tgrid.shape}")
    return 2.0 * (pred - tgrid) / pred.size


def bce_logits(logits: np.ndarray, targets: np.ndarray):
    """Mean binary cross-entropy on raw logits; returns (loss, grad_logits)."""
    loss = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    z = np.exp(-np.abs(logits))
    sig = np.where(logits >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return float(loss.mean()), (sig - targets) / logits.size


def iou_loss(pred: np.ndarray, gt: np.ndarray):
    """1 - IoU per row of (M, 4) corner arrays, with gradient w.r.t. pred.

    Piecewise differentiable; the subgradient at corner ties is taken from
    the interior side.
    """
    px1, py1, px2, py2 = pred.T
    gx1, gy1, gx2, gy2 = gt.T
    ix1 = np.maximum(px1, gx1)
    iy1 = np.maximum(py1, gy1)
    ix2 = np.minimum(px2, gx2)
    iy2 = np.minimum(py2, gy2)
    iw = np.maximum(ix2 - ix1, 0.0)
    ih = np.maximum(iy2 - iy1, 0.0)
    inter = iw * ih
    area_p = (px2 - px1) * (py2 - py1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter
    iou = inter / np.maximum(union, 1e-12)
    losses = 1.0 - iou

    ov = iw > 0
    oh = ih > 0
    overlap = ov & oh
    # dI/d pred corner, nonzero only when that corner bounds the intersection
    di_px1 = np.where(overlap & (px1 >= gx1), -ih, 0.0)
    di_px2 = np.where(overlap & (px2 <= gx2), ih, 0.0)
    di_py1 = np.where(overlap & (py1 >= gy1), -iw, 0.0)
    di_py2 = np.where(overlap & (py2 <= gy2), iw, 0.0)
    da_px1 = -(py2 - py1)
    da_px2 = (py2 - py1)
    da_py1 = -(px2 - px1)
    da_py2 = (px2 - px1)
    u = np.maximum(union, 1e-12)
    def d_iou(di, da):
        return (di * u - inter * (da - di)) / (u * u)
    grad = -np.stack([
        d_iou(di_px1, da_px1),
        d_iou(di_py1, da_py1),
        d_iou(di_px2, da_px2),
        d_iou(di_py2, da_py2),
    ], axis=1)
    return losses, grad


def total_loss(box_loss: float, cls_loss: float, dfl_loss: float,
               aux_loss: float, w: LossWeights) -> float:
    terms = {"box": box_loss, "cls": cls_loss, "dfl": dfl_loss, "aux": aux_loss}
    bad = [k for k, v in terms.items() if not np.isfinite(v)]
    if bad:
        raise LossError(f"non-finite loss term(s): {', '.join(bad)} ({terms})")
    return (w.w_box * box_loss + w.w_cls * cls_loss
            + w.w_dfl * dfl_loss + w.w_aux * aux_loss)
