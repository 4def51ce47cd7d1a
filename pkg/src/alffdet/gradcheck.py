"""Finite-difference verification of every analytic backward pass.

Each unit builds a small randomized instance, reduces the output to a scalar
with a fixed random weighting, and compares the analytic gradient against
central differences (step 1e-5) in float64.  Errors are norm-relative:
||a - n|| / (||a|| + ||n|| + eps).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .alff import alff_backward, alff_forward, init_alff
from .detector import ModelSpec, assign_targets
from .geometry import Box, GridSpec, render_heatmap
from .losses import (BinDistribution, NoiseConfig, dfl, dfl_grad_logits,
                     heatmap_loss, heatmap_loss_grad, noise_calibrate)
from .nn.conv_block import (conv_block_backward, conv_block_forward,
                            init_conv_block)
from .nn.lstm import LstmState, init_lstm, lstm_cell_backward, lstm_cell_forward
from .nn import ops
from .train import RunConfig, TrainItem, train_step
from .detector import init_detector

FD_STEP = 1e-5
TOL_UNIT = 1e-4
TOL_PIPELINE = 1e-3


@dataclass
class UnitResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    # the floor keeps dead parameters (true gradient ~ 0, e.g. a conv bias
    # that normalization cancels) from amplifying finite-difference noise
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-3)
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(f, arr: np.ndarray, indices=None, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. entries of arr
    (in place); restricted to `indices` (flat) when given."""
    flat = arr.reshape(-1)
    idx = list(range(flat.size)) if indices is None else list(indices)
    g = np.zeros(len(idx))
    for out_k, k in enumerate(idx):
        orig = flat[k]
        flat[k] = orig + step
        fp = f()
        flat[k] = orig - step
        fm = f()
        flat[k] = orig
        g[out_k] = (fp - fm) / (2.0 * step)
    return g


def _check_arrays(f, pairs, sample_rng=None, max_entries=None) -> float:
    """pairs: (array, analytic_grad).  Returns the worst norm-relative error."""
    worst = 0.0
    for arr, agrad in pairs:
        if max_entries is not None and arr.size > max_entries:
            idx = sorted(sample_rng.choice(arr.size, size=max_entries, replace=False))
        else:
            idx = None
        num = numeric_grad(f, arr, indices=idx)
        ana = agrad.reshape(-1) if idx is None else agrad.reshape(-1)[idx]
        worst = max(worst, _rel_err(ana, num))
    return worst


def check_lstm_cell(seed: int) -> float:
    rng = rngmod.stream(seed, rngmod.GRADCHECK, 1)
    input_dim, hidden = 3, 4
    wts = init_lstm(rng, input_dim, hidden)
    x = rng.standard_normal(input_dim)
    h0 = rng.standard_normal(hidden)
    c0 = rng.standard_normal(hidden)
    wh = rng.standard_normal(hidden)
    wc = rng.standard_normal(hidden)

    def loss():
        st, _ = lstm_cell_forward(x, LstmState(h0, c0), wts)
        return float(wh @ st.h + wc @ st.c)

    st, cache = lstm_cell_forward(x, LstmState(h0, c0), wts)
    gx, gstate, gw = lstm_cell_backward(wh, wc, cache, wts)
    pairs = [(x, gx), (h0, gstate.h), (c0, gstate.c)]
    pairs += [(getattr(wts, n), g) for n, g in gw.field_arrays()]
    return _check_arrays(loss, pairs)


def check_conv_block(seed: int) -> float:
    rng = rngmod.stream(seed, rngmod.GRADCHECK, 2)
    p = init_conv_block(rng, 2, 3)
    x = rng.standard_normal((2, 6, 6))
    r = rng.standard_normal((3, 6, 6))

    def loss():
        y, _ = conv_block_forward(x, p)
        return float((r * y).sum())

    y, cache = conv_block_forward(x, p)
    gx, gp = conv_block_backward(r, cache, p)
    pairs = [(x, gx), (p.kernels, gp.kernels), (p.bias, gp.bias),
             (p.gamma, gp.gamma), (p.beta, gp.beta)]
    return _check_arrays(loss, pairs)


def check_alff(seed: int) -> float:
    rng = rngmod.stream(seed, rngmod.GRADCHECK, 3)
    p = init_alff(rng, in_ch=2, block_ch=2, hidden_dim=2, up_factor=8)
    x = rng.standard_normal((2, 4, 4))
    r = rng.standard_normal((1, 32, 32))

    def loss():
        y, _ = alff_forward(x, p)
        return float((r * y).sum())

    y, cache = alff_forward(x, p)
    gx, gp = alff_backward(r, cache, p)
    pairs = [(x, gx), (p.fc_w, gp.fc_w), (p.fc_b, gp.fc_b)]
    for blk, gblk in zip(p.blocks, gp.blocks):
        pairs += [(blk.kernels, gblk.kernels), (blk.bias, gblk.bias),
                  (blk.gamma, gblk.gamma), (blk.beta, gblk.beta)]
    pairs += [(getattr(p.lstm, n), g) for n, g in gp.lstm.field_arrays()]
    return _check_arrays(loss, pairs)


def check_dfl(seed: int) -> float:
    rng = rngmod.stream(seed, rngmod.GRADCHECK, 4)
    logits = rng.standard_normal(16)
    y = float(rng.uniform(0.1, 14.9))

    def loss():
        return dfl(BinDistribution.from_logits(logits), y)

    ana = dfl_grad_logits(BinDistribution.from_logits(logits), y)
    return _check_arrays(loss, [(logits, ana)])


def check_nc_dfl(seed: int) -> float:
    rng = rngmod.stream(seed, rngmod.GRADCHECK, 5)
    logits = rng.standard_normal(16)
    cfg = NoiseConfig(alpha=1.0, mu=0.0, sigma_n=1.0, seed=seed)
    xi = float(rng.standard_normal())
    y = float(rng.uniform(0.1, 6.0))
    y_g = float(noise_calibrate(y, cfg, xi))

    def loss():
        return dfl(BinDistribution.from_logits(logits), y_g)

    ana = dfl_grad_logits(BinDistribution.from_logits(logits), y_g)
    return _check_arrays(loss, [(logits, ana)])


def check_heatmap_loss(seed: int) -> float:
    rng = rngmod.stream(seed, rngmod.GRADCHECK, 6)
    pred = rng.uniform(0, 1, (1, 8, 8))
    target = rng.uniform(0, 1, (1, 8, 8))

    def loss():
        return heatmap_loss(pred, target)

    return _check_arrays(loss, [(pred, heatmap_loss_grad(pred, target))])


def _pipeline_instance(seed: int):
    spec = ModelSpec.reduced()
    params = init_detector(seed, spec, dtype=np.float64)
    gspec = GridSpec(32, 32, 8)
    boxes = [Box(5.0, 6.0, 15.0, 14.0), Box(18.0, 18.0, 30.0, 29.0)]
    rng = rngmod.stream(seed, rngmod.GRADCHECK, 7)
    image = rng.uniform(0, 1, (3, 32, 32))
    heat = render_heatmap(boxes, gspec).grid
    item = TrainItem(0, image, boxes, ops.upsample_nearest(heat[None], 8)[0],
                     assign_targets(boxes, 32, spec.n_bins))
    cfg = RunConfig(image_size=32, enable_alff=True, enable_ncdfl=True, seed=seed)
    return params, item, cfg


def check_full_pipeline(seed: int) -> float:
    params, item, cfg = _pipeline_instance(seed)

    def loss():
        comps, _ = train_step(params, [item], cfg, step_index=0)
        return comps["total"]

    _, grads = train_step(params, [item], cfg, step_index=0)
    from .train import named_arrays

    pmap = dict(named_arrays(params))
    gmap = dict(named_arrays(grads))
    srng = rngmod.stream(seed, rngmod.GRADCHECK, 8)
    pairs = [(pmap[n], gmap[n]) for n in pmap]
    return _check_arrays(loss, pairs, sample_rng=srng, max_entries=8)


UNITS = [
    ("lstm_cell", check_lstm_cell, TOL_UNIT),
    ("conv_block", check_conv_block, TOL_UNIT),
    ("alff", check_alff, TOL_UNIT),
    ("dfl", check_dfl, TOL_UNIT),
    ("nc_dfl", check_nc_dfl, TOL_UNIT),
    ("heatmap_loss", check_heatmap_loss, TOL_UNIT),
    ("full_pipeline", check_full_pipeline, TOL_PIPELINE),
]


def run_all(seed: int = 0, corrupt: str | None = None) -> list[UnitResult]:
    """Run every finite-difference suite.  `corrupt` names a unit whose
    analytic result is deliberately spoiled, to prove detector sensitivity."""
    results = []
    for name, fn, tol in UNITS:
        err = fn(seed)
        if corrupt == name:
            err += 1.0
        results.append(UnitResult(name, err, tol))
    return results
