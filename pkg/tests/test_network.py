"""CLSTM cell against a gate-by-gate oracle, architecture shape
contracts, and parameter initialization."""

import numpy as np
import pytest
from scipy.ndimage import correlate

import tumorreg.autodiff as ad
from tumorreg.autodiff import ShapeError, Tensor
from tumorreg.network import (GATES, NetworkParams, RecurrentState, clstm_step,
                              init_params, param_spec, predict_velocity)

from conftest import fd_gradcheck, t


def conv_same_oracle(x, w):
    """scipy-based 3D convolution with zero padding, channel summing."""
    co = w.shape[0]
    out = np.zeros((co,) + x.shape[1:])
    for o in range(co):
        for i in range(x.shape[0]):
            out[o] += correlate(x[i].astype(np.float64), w[o, i].astype(np.float64),
                                mode="constant", cval=0.0)
    return out


def gate_oracle(x, h, c, params, level):
    """Direct evaluation of the gate equations with scipy convolutions."""
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))  # noqa: E731

    def gate(name, act):
        wx = params[f"enc{level}.W_x{name}"].data
        wh = params[f"enc{level}.W_h{name}"].data
        b = params[f"enc{level}.b_{name}"].data
        z = conv_same_oracle(x, wx) + conv_same_oracle(h, wh) + b[:, None, None, None]
        return act(z)

    f = gate("f", sig)
    i = gate("i", sig)
    c_tilde = gate("c", np.tanh)
    o = gate("o", sig)
    c_new = f * c + i * c_tilde
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def random_params(levels, channels, seed, in_channels=4):
    rng = np.random.default_rng(seed)
    tensors, order = {}, []
    for name, shape in param_spec(levels, channels, in_channels):
        tensors[name] = Tensor(rng.normal(0, 0.3, size=shape).astype(np.float32),
                               requires_grad=True)
        order.append(name)
    return NetworkParams(tensors, order)


class TestClstmStep:
    def test_all_zero_params_give_half_gates(self):
        params = init_params(2, (4, 8), seed=0)
        for name, tensor in params.items():
            tensor.data[...] = 0.0
        x = t(np.random.default_rng(0).normal(0, 1, (4, 4, 4, 4)))
        h0 = ad.zeros((4, 4, 4, 4))
        c0 = ad.zeros((4, 4, 4, 4))
        h1, c1 = clstm_step(x, h0, c0, params, 0)
        # f = i = o = sigmoid(0) = 0.5 and c~ = tanh(0) = 0, so c = h = 0
        np.testing.assert_allclose(c1.data, 0.0, atol=1e-7)
        np.testing.assert_allclose(h1.data, 0.0, atol=1e-7)

    def test_matches_gate_oracle(self, rng):
        params = random_params(2, (3, 4), seed=5, in_channels=1)
        x = rng.normal(0, 1, (1, 4, 4, 4)).astype(np.float32)
        h = rng.normal(0, 1, (3, 4, 4, 4)).astype(np.float32)
        c = rng.normal(0, 1, (3, 4, 4, 4)).astype(np.float32)
        h_new, c_new = clstm_step(t(x), t(h), t(c), params, 0)
        h_exp, c_exp = gate_oracle(x, h, c, params, 0)
        np.testing.assert_allclose(h_new.data, h_exp, atol=1e-5)
        np.testing.assert_allclose(c_new.data, c_exp, atol=1e-5)

    def test_gradients_wrt_every_gate_kernel(self, rng):
        params = random_params(2, (2, 4), seed=7, in_channels=1)
        x = t(rng.normal(0, 1, (1, 3, 3, 3)))
        h = t(rng.normal(0, 1, (2, 3, 3, 3)))
        c = t(rng.normal(0, 1, (2, 3, 3, 3)))
        leaves = [params[f"enc0.W_x{g}"] for g in GATES]
        leaves += [params[f"enc0.W_h{g}"] for g in GATES]
        leaves += [params[f"enc0.b_{g}"] for g in GATES]
        # h = 2e-3 keeps float32 evaluation noise below the quotient
        err = fd_gradcheck(lambda: clstm_step(x, h, c, params, 0)[0].sum(), leaves,
                           h=2e-3)
        assert err <= 1e-3

    def test_shape_mismatch(self, rng):
        params = random_params(2, (2, 4), seed=3, in_channels=1)
        x = t(rng.normal(0, 1, (1, 4, 4, 4)))
        h = t(rng.normal(0, 1, (2, 4, 4, 4)))
        c = t(rng.normal(0, 1, (2, 4, 4, 2)))
        with pytest.raises(ShapeError):
            clstm_step(x, h, c, params, 0)


class TestArchitecture:
    def test_encoder_halves_and_decoder_restores(self):
        params = init_params(3, (4, 8, 8), seed=0)
        state = RecurrentState(3)
        x = t(np.random.default_rng(1).normal(0, 1, (4, 16, 16, 12)))
        v, skips = predict_velocity(x, state, params, 3, (4, 8, 8))
        assert [s.shape[1:] for s in skips] == [(16, 16, 12), (8, 8, 6), (4, 4, 3)]
        assert [s.shape[0] for s in skips] == [4, 8, 8]
        assert v.shape == (3, 16, 16, 12)

    def test_full_res_flow_shape(self):
        params = init_params(2, (4, 8), seed=0, full_res_flow=True)
        state = RecurrentState(2)
        x = t(np.random.default_rng(1).normal(0, 1, (4, 8, 8, 8)))
        v, _ = predict_velocity(x, state, params, 2, (4, 8), full_res_flow=True)
        assert v.shape == (3, 8, 8, 8)

    def test_odd_extents_supported(self):
        params = init_params(3, (4, 4, 8), seed=0)
        state = RecurrentState(3)
        x = t(np.random.default_rng(1).normal(0, 1, (4, 12, 12, 9)))
        v, _ = predict_velocity(x, state, params, 3, (4, 4, 8))
        assert v.shape == (3, 12, 12, 9)

    def test_zero_flow_head_gives_zero_velocity(self):
        params = init_params(3, (4, 8, 8), seed=0)
        state = RecurrentState(3)
        x = t(np.random.default_rng(2).normal(0, 1, (4, 8, 8, 8)))
        v, _ = predict_velocity(x, state, params, 3, (4, 8, 8))
        assert np.array_equal(v.data, np.zeros((3, 8, 8, 8), np.float32))

    def test_nonfinite_activation_detected(self):
        params = init_params(2, (4, 8), seed=0)
        params["enc0.W_xf"].data[...] = np.inf
        state = RecurrentState(2)
        x = t(np.ones((4, 8, 8, 8)))
        with pytest.raises(FloatingPointError, match="level 0"):
            predict_velocity(x, state, params, 2, (4, 8))


class TestParams:
    def test_spec_validation(self):
        with pytest.raises(ValueError):
            param_spec(1, (4,))
        with pytest.raises(ValueError):
            param_spec(2, (4,))
        with pytest.raises(ValueError):
            param_spec(2, (4, 0))

    def test_init_deterministic(self):
        a = init_params(3, (4, 8, 8), seed=11)
        b = init_params(3, (4, 8, 8), seed=11)
        for (na, ta), (nb, tb) in zip(a.items(), b.items()):
            assert na == nb
            assert np.array_equal(ta.data, tb.data)

    def test_flow_head_and_biases_zero(self):
        params = init_params(2, (4, 8), seed=0)
        assert np.all(params["flow.w"].data == 0)
        assert np.all(params["flow.b"].data == 0)
        for g in GATES:
            assert np.all(params[f"enc0.b_{g}"].data == 0)

    def test_hidden_state_persistence(self):
        # the recurrent state must carry across steps and start at zero
        params = random_params(2, (3, 4), seed=9, in_channels=4)
        state = RecurrentState(2)
        rng = np.random.default_rng(0)
        x = t(rng.normal(0, 1, (4, 8, 8, 8)))
        assert state.hc[0] is None
        predict_velocity(x, state, params, 2, (3, 4))
        h_after_1 = state.hc[0][0].data.copy()
        predict_velocity(x, state, params, 2, (3, 4))
        assert not np.array_equal(state.hc[0][0].data, h_after_1)
