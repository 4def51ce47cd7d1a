"""A single LSTM cell with analytic forward and backward.

Gate layout follows the usual convention: separate input-to-gate and
hidden-to-gate matrices plus separate biases for the input (i), forget (f),
cell candidate (g) and output (o) gates.  The cell is applied to a column
batch, i.e. x may be (input_dim,) or (input_dim, L) for L independent
locations sharing the same weights.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .ops import DimensionError, sigmoid


@dataclass
class LstmWeights:
    W_ii: np.ndarray
    W_if: np.ndarray
    W_ig: np.ndarray
    W_io: np.ndarray
    W_hi: np.ndarray
    W_hf: np.ndarray
    W_hg: np.ndarray
    W_ho: np.ndarray
    b_ii: np.ndarray
    b_if: np.ndarray
    b_ig: np.ndarray
    b_io: np.ndarray
    b_hi: np.ndarray
    b_hf: np.ndarray
    b_hg: np.ndarray
    b_ho: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.W_ii.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W_ii.shape[0]

    def stacked(self):
        """(Wi (4H, I), Wh (4H, H), b (4H,)) in gate order i, f, g, o."""
        wi = np.concatenate([self.W_ii, self.W_if, self.W_ig, self.W_io])
        wh = np.concatenate([self.W_hi, self.W_hf, self.W_hg, self.W_ho])
        bi = np.concatenate([self.b_ii, self.b_if, self.b_ig, self.b_io])
        bh = np.concatenate([self.b_hi, self.b_hf, self.b_hg, self.b_ho])
        return wi, wh, bi, bh

    def field_arrays(self):
        for f in fields(self):
            yield f.name, getattr(self, f.name)


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray


@dataclass
class LstmCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray


def zeros_like_weights(wts: LstmWeights) -> LstmWeights:
    return LstmWeights(*(np.zeros_like(getattr(wts, f.name)) for f in fields(wts)))


def init_lstm(rng: np.random.Generator, input_dim: int, hidden_dim: int,
              dtype=np.float64, forget_bias: float = 1.0) -> LstmWeights:
    """Symmetric uniform init; the forget-gate bias starts at 1 so the cell
    state is not washed out in early training."""
    k_i = 1.0 / np.sqrt(input_dim)
    k_h = 1.0 / np.sqrt(hidden_dim)
    def wi():
        return rng.uniform(-k_i, k_i, (hidden_dim, input_dim)).astype(dtype)
    def wh():
        return rng.uniform(-k_h, k_h, (hidden_dim, hidden_dim)).astype(dtype)
    def b():
        return rng.uniform(-k_h, k_h, hidden_dim).astype(dtype)
    wts = LstmWeights(wi(), wi(), wi(), wi(), wh(), wh(), wh(), wh(),
                      b(), b(), b(), b(), b(), b(), b(), b())
    wts.b_if[:] = forget_bias
    return wts


def _as_cols(v: np.ndarray) -> np.ndarray:
    return v[:, None] if v.ndim == 1 else v


def lstm_cell_forward(x_t: np.ndarray, state: LstmState, wts: LstmWeights):
    """One step of the gated recurrence; returns (new_state, cache)."""
    squeeze = x_t.ndim == 1
    x = _as_cols(x_t)
    h_prev = _as_cols(state.h)
    c_prev = _as_cols(state.c)
    if x.shape[0] != wts.input_dim:
        raise DimensionError(f"input dim {x.shape[0]} != weights {wts.input_dim}")
    if h_prev.shape[0] != wts.hidden_dim:
        raise DimensionError(f"hidden dim {h_prev.shape[0]} != weights {wts.hidden_dim}")
    wi, wh, bi, bh = wts.stacked()
    gates = wi @ x + bi[:, None] + wh @ h_prev + bh[:, None]
    hd = wts.hidden_dim
    i = sigmoid(gates[:hd])
    f = sigmoid(gates[hd : 2 * hd])
    g = np.tanh(gates[2 * hd : 3 * hd])
    o = sigmoid(gates[3 * hd :])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    cache = LstmCache(x, h_prev, c_prev, i, f, g, o, c, tanh_c)
    if squeeze:
        return LstmState(h[:, 0], c[:, 0]), cache
    return LstmState(h, c), cache


def lstm_cell_backward(grad_h: np.ndarray, grad_c: np.ndarray, cache: LstmCache,
                       wts: LstmWeights):
    """Adjoint of one step: (grad_x, grad_prev_state, grad_weights)."""
    squeeze = grad_h.ndim == 1
    gh = _as_cols(grad_h)
    gc_in = _as_cols(grad_c)
    if gh.shape != cache.o.shape:
        raise DimensionError(
            f"grad_h shape {gh.shape} does not match cache {cache.o.shape}")
    i, f, g, o = cache.i, cache.f, cache.g, cache.o
    go = gh * cache.tanh_c
    gc = gc_in + gh * o * (1.0 - cache.tanh_c ** 2)
    gi = gc * g
    gf = gc * cache.c_prev
    gg = gc * i
    gc_prev = gc * f
    # pre-activation gate gradients, stacked in gate order i, f, g, o
    gpre = np.concatenate([
        gi * i * (1.0 - i),
        gf * f * (1.0 - f),
        gg * (1.0 - g ** 2),
        go * o * (1.0 - o),
    ])
    wi, wh, _, _ = wts.stacked()
    gx = wi.T @ gpre
    gh_prev = wh.T @ gpre
    g_wi = gpre @ cache.x.T
    g_wh = gpre @ cache.h_prev.T
    g_b = gpre.sum(axis=1)
    hd = wts.hidden_dim
    def part(m, k):
        return m[k * hd : (k + 1) * hd]
    grad_wts = LstmWeights(
        part(g_wi, 0), part(g_wi, 1), part(g_wi, 2), part(g_wi, 3),
        part(g_wh, 0), part(g_wh, 1), part(g_wh, 2), part(g_wh, 3),
        part(g_b, 0), part(g_b, 1), part(g_b, 2), part(g_b, 3),
        part(g_b, 0).copy(), part(g_b, 1).copy(), part(g_b, 2).copy(), part(g_b, 3).copy(),
    )
    if squeeze:
        return gx[:, 0], LstmState(gh_prev[:, 0], gc_prev[:, 0]), grad_wts
    return gx, LstmState(gh_prev, gc_prev), grad_wts


def lstm_sequence_forward(xs: list[np.ndarray], wts: LstmWeights, cols: int = 1):
    """Run a whole input sequence from a zero initial state.

    Returns the per-step hidden states and the caches needed for backward.
    """
    dtype = xs[0].dtype
    shape = (wts.hidden_dim,) if xs[0].ndim == 1 else (wts.hidden_dim, xs[0].shape[1])
    state = LstmState(np.zeros(shape, dtype), np.zeros(shape, dtype))
    hs, caches = [], []
    for x in xs:
        state, cache = lstm_cell_forward(x, state, wts)
        hs.append(state.h)
        caches.append(cache)
    return hs, caches


def lstm_sequence_backward(grad_hs: list[np.ndarray], caches: list[LstmCache],
                           wts: LstmWeights):
    """Backprop through time over a full sequence; grad_hs aligns with the
    hidden states returned by lstm_sequence_forward."""
    acc = zeros_like_weights(wts)
    gxs: list[np.ndarray] = [None] * len(caches)  # type: ignore[list-item]
    gh = np.zeros_like(grad_hs[-1])
    gc = np.zeros_like(grad_hs[-1])
    for t in range(len(caches) - 1, -1, -1):
        gx, gstate, gw = lstm_cell_backward(grad_hs[t] + gh, gc, caches[t], wts)
        gxs[t] = gx
        gh, gc = gstate.h, gstate.c
        for name, arr in acc.field_arrays():
            arr += getattr(gw, name)
    return gxs, acc
