import math

import numpy as np
import pytest

from alffdet import rng as rngmod
from alffdet.nn.lstm import (LstmState, LstmWeights, init_lstm,
                             lstm_cell_backward, lstm_cell_forward,
                             lstm_sequence_backward, lstm_sequence_forward,
                             zeros_like_weights)


def scalar_weights(w=1.0, b=0.0, forget_bias=None):
    one = np.full((1, 1), w)
    bias = np.full(1, b)
    wts = LstmWeights(*([one.copy() for _ in range(8)]
                        + [bias.copy() for _ in range(8)]))
    if forget_bias is not None:
        wts.b_if[:] = forget_bias
    return wts


class TestScalarOracles:
    def test_all_zero_weights(self):
        wts = scalar_weights(w=0.0)
        st, _ = lstm_cell_forward(np.ones(1), LstmState(np.zeros(1), np.zeros(1)), wts)
        assert st.h[0] == 0.0 and st.c[0] == 0.0

    def test_unit_weight_case(self):
        # hand evaluation: i = f = o = sigmoid(1), g = tanh(1),
        # c = i*g, h = o*tanh(c)
        wts = scalar_weights()
        st, _ = lstm_cell_forward(np.ones(1), LstmState(np.zeros(1), np.zeros(1)), wts)
        sig1 = 1.0 / (1.0 + math.exp(-1.0))
        c = sig1 * math.tanh(1.0)
        h = sig1 * math.tanh(c)
        assert st.c[0] == pytest.approx(c, abs=1e-12)
        assert st.h[0] == pytest.approx(h, abs=1e-4)
        assert st.h[0] == pytest.approx(0.3696, abs=1e-4)

    def test_saturated_forget_gate_preserves_cell(self):
        wts = scalar_weights(w=0.0, forget_bias=20.0)
        c0 = np.array([0.73])
        st, _ = lstm_cell_forward(np.ones(1), LstmState(np.zeros(1), c0), wts)
        assert st.c[0] == pytest.approx(0.73, abs=1e-6)


class TestCellForward:
    def test_matches_direct_gate_arithmetic(self):
        rng = rngmod.stream(0, rngmod.GRADCHECK, 90)
        wts = init_lstm(rng, 3, 4)
        x = rng.standard_normal(3)
        h0 = rng.standard_normal(4)
        c0 = rng.standard_normal(4)
        st, _ = lstm_cell_forward(x, LstmState(h0, c0), wts)
        sig = lambda v: 1.0 / (1.0 + np.exp(-v))
        i = sig(wts.W_ii @ x + wts.b_ii + wts.W_hi @ h0 + wts.b_hi)
        f = sig(wts.W_if @ x + wts.b_if + wts.W_hf @ h0 + wts.b_hf)
        g = np.tanh(wts.W_ig @ x + wts.b_ig + wts.W_hg @ h0 + wts.b_hg)
        o = sig(wts.W_io @ x + wts.b_io + wts.W_ho @ h0 + wts.b_ho)
        c = f * c0 + i * g
        assert np.allclose(st.c, c, atol=1e-12)
        assert np.allclose(st.h, o * np.tanh(c), atol=1e-12)

    def test_column_batch_matches_loop(self):
        rng = rngmod.stream(0, rngmod.GRADCHECK, 91)
        wts = init_lstm(rng, 3, 4)
        xs = rng.standard_normal((3, 5))
        h0 = rng.standard_normal((4, 5))
        c0 = rng.standard_normal((4, 5))
        st, _ = lstm_cell_forward(xs, LstmState(h0, c0), wts)
        for j in range(5):
            sj, _ = lstm_cell_forward(xs[:, j], LstmState(h0[:, j], c0[:, j]), wts)
            assert np.allclose(st.h[:, j], sj.h, atol=1e-12)
            assert np.allclose(st.c[:, j], sj.c, atol=1e-12)


class TestSequence:
    def test_compositionality_exact(self):
        # running the 3-step sequence must equal three manual cell steps
        rng = rngmod.stream(0, rngmod.GRADCHECK, 92)
        wts = init_lstm(rng, 3, 4)
        xs = [rng.standard_normal(3) for _ in range(3)]
        hs, _ = lstm_sequence_forward(xs, wts)
        state = LstmState(np.zeros(4), np.zeros(4))
        for t in range(3):
            state, _ = lstm_cell_forward(xs[t], state, wts)
            assert np.array_equal(hs[t], state.h)

    def test_bptt_matches_finite_differences(self):
        rng = rngmod.stream(0, rngmod.GRADCHECK, 93)
        wts = init_lstm(rng, 2, 3)
        xs = [rng.standard_normal(2) for _ in range(3)]
        r = [rng.standard_normal(3) for _ in range(3)]

        def loss():
            hs, _ = lstm_sequence_forward(xs, wts)
            return float(sum(rv @ hv for rv, hv in zip(r, hs)))

        hs, caches = lstm_sequence_forward(xs, wts)
        gxs, gw = lstm_sequence_backward(r, caches, wts)
        step = 1e-6
        for name, arr in wts.field_arrays():
            ana = getattr(gw, name)
            num = np.zeros_like(arr)
            flat, nflat = arr.reshape(-1), num.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                fp = loss()
                flat[k] = orig - step
                fm = loss()
                flat[k] = orig
                nflat[k] = (fp - fm) / (2 * step)
            assert np.allclose(ana, num, atol=1e-5), name
        for t, x in enumerate(xs):
            num = np.zeros_like(x)
            for k in range(x.size):
                orig = x[k]
                x[k] = orig + step
                fp = loss()
                x[k] = orig - step
                fm = loss()
                x[k] = orig
                num[k] = (fp - fm) / (2 * step)
            assert np.allclose(gxs[t], num, atol=1e-5)


class TestInit:
    def test_forget_bias_is_one(self):
        wts = init_lstm(rngmod.stream(0, rngmod.INIT, 9), 4, 6)
        assert np.all(wts.b_if == 1.0)

    def test_shapes(self):
        wts = init_lstm(rngmod.stream(0, rngmod.INIT, 9), 4, 6)
        assert wts.input_dim == 4 and wts.hidden_dim == 6
        assert wts.W_hg.shape == (6, 6) and wts.b_ho.shape == (6,)

    def test_zero_grad_template(self):
        wts = init_lstm(rngmod.stream(0, rngmod.INIT, 9), 4, 6)
        z = zeros_like_weights(wts)
        assert all(np.all(a == 0) for _, a in z.field_arrays())


def test_cell_backward_zero_upstream_gives_zero():
    rng = rngmod.stream(0, rngmod.GRADCHECK, 94)
    wts = init_lstm(rng, 3, 4)
    x = rng.standard_normal(3)
    st, cache = lstm_cell_forward(x, LstmState(np.zeros(4), np.zeros(4)), wts)
    gx, gstate, gw = lstm_cell_backward(np.zeros(4), np.zeros(4), cache, wts)
    assert np.all(gx == 0) and np.all(gstate.h == 0) and np.all(gstate.c == 0)
    assert all(np.all(a == 0) for _, a in gw.field_arrays())
