import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from hstory import numerics as nx
from hstory.numerics import Tensor
from hstory.recurrent import CellState, LstmParams, step, zero_state


def lstm(seed, d_in, dim, scale=1.0):
    p = LstmParams.init(np.random.default_rng(seed), d_in, dim, "cell")
    for t in p.tensors():
        t.data *= scale
    return p


def arrays(p):
    return {"W_x": p.W_x.data, "W_h": p.W_h.data, "W_z": p.W_z.data, "b": p.b.data}


def state(h, c):
    return CellState(Tensor(np.asarray(h, float)), Tensor(np.asarray(c, float)))


def test_zero_parameters():
    p = lstm(0, 3, 4, scale=0.0)
    c0 = np.array([1.0, -2.0, 0.5, 3.0])
    out = step(np.ones(3), np.ones(4), state(np.ones(4), c0), p)
    assert np.allclose(out.c.data, 0.5 * c0, rtol=1e-15)
    assert np.allclose(out.h.data, 0.5 * np.tanh(0.5 * c0), rtol=1e-15)


def test_all_zero_inputs_and_state():
    p = lstm(1, 3, 4)
    p.b.data[:] = 0.0
    out = step(np.zeros(3), np.zeros(4), zero_state(4), p)
    assert not out.h.data.any() and not out.c.data.any()


def test_matches_hand_unrolled_gates():
    rng = np.random.default_rng(2)
    p = lstm(2, 5, 4, scale=2.0)
    x, z, h, c = rng.normal(size=5), rng.normal(size=4), rng.normal(size=4), rng.normal(size=4)
    out = step(x, z, state(h, c), p)
    ref_h, ref_c = oracles.lstm_step(arrays(p), x, z, h, c)
    assert np.max(np.abs(out.h.data - ref_h)) <= 1e-12
    assert np.max(np.abs(out.c.data - ref_c)) <= 1e-12


def test_gate_views_follow_ifoq_layout():
    p = lstm(3, 2, 3)
    assert p.gate("f")["b"].tolist() == [1.0, 1.0, 1.0]
    assert np.shares_memory(p.gate("q")["W_x"], p.W_x.data)
    assert np.array_equal(p.gate("o")["W_h"], p.W_h.data[:, 6:9])


def test_init_bounds():
    p = lstm(4, 7, 16)
    for t in (p.W_x, p.W_h, p.W_z):
        assert np.abs(t.data).max() <= 0.25
    assert p.W_x.shape == (7, 64) and p.b.shape == (64,)


def test_memory_carry_with_saturated_gates():
    rng = np.random.default_rng(5)
    p = lstm(5, 3, 4)
    p.b.data[0:4] = -20.0   # input gate closed
    p.b.data[4:8] = 20.0    # forget gate open
    c = rng.normal(size=4)
    out = step(rng.normal(size=3), rng.normal(size=4), state(rng.normal(size=4) * 0.1, c), p)
    assert np.max(np.abs(out.c.data - c)) <= 1e-6


def test_dimension_mismatch():
    p = lstm(6, 3, 4)
    with pytest.raises(nx.ShapeError):
        step(np.zeros(2), np.zeros(4), zero_state(4), p)
    with pytest.raises(nx.ShapeError):
        step(np.zeros(3), np.zeros(5), zero_state(4), p)
    with pytest.raises(nx.ShapeError):
        step(np.zeros(3), np.zeros(4), zero_state(3), p)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 50.0))
def test_hidden_state_is_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    p = lstm(seed, 3, 5, scale=scale)
    st_ = state(rng.normal(size=5), rng.normal(size=5) * scale)
    for _ in range(5):
        st_ = step(rng.normal(size=3) * scale, rng.normal(size=5) * scale, st_, p)
        assert np.all(np.abs(st_.h.data) <= 1.0)
        assert np.all(np.isfinite(st_.c.data))


def test_step_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    p = lstm(7, 3, 4)
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    z = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    h = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    c = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    wh, wc = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))

    def f():
        s = step(x, z, CellState(h, c), p)
        s = step(x, z, s, p)
        return nx.tsum(s.h * wh) + nx.tsum(s.c * wc)

    assert nx.gradcheck(f, p.tensors() + [x, z, h, c]) <= 1e-5
