"""Quantization, spike encoding and requantization against hand values."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_net
from spikebit.encode import (QuantConfig, calibrate_activations, decode_planes,
                             derive_scales, encode_input, quant_report,
                             quantize_network, quantize_weights,
                             requantize, requantize_shift, weight_scale)
from spikebit.errors import (DeadLayer, DegenerateWeights,
                             EmptyCalibrationSet, NegativeInput,
                             RequantShiftError)
from spikebit.model import CONV


def test_weight_scale_hand_values():
    cfg = QuantConfig(bits=3, time_steps=4, clamp_sigma=3.0)
    # mean 0, sigma 0.125  ->  B - ceil(log2 0.375) - 1 = 3 + 1 - 1 = 3
    assert weight_scale(np.array([0.125, -0.125]), cfg) == 3
    # mean 0, sigma 1/3    ->  argument 1.0, ceil = 0  ->  2
    assert weight_scale(np.array([1 / 3, -1 / 3]), cfg) == 2


def test_weight_scale_degenerate_warns():
    cfg = QuantConfig(bits=3, time_steps=4)
    with pytest.warns(DegenerateWeights):
        assert weight_scale(np.zeros(9), cfg) == 2  # B - 1


def test_quantize_weights_hand_values():
    cfg = QuantConfig(bits=3, time_steps=4)
    q = quantize_weights(np.array([0.3, 0.9, 0.0, -0.3]), 3, cfg)
    assert q.data.tolist() == [2, 3, 0, -2]   # 0.9 * 8 = 7.2 clamps to 3
    assert q.clamped == 1
    assert q.frac_bits == 3


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40),
       st.integers(-4, 10), st.integers(1, 8))
def test_quantized_range(values, frac, bits):
    cfg = QuantConfig(bits=bits, time_steps=4)
    q = quantize_weights(np.array(values), frac, cfg)
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    assert q.data.min() >= lo and q.data.max() <= hi


def test_encode_input_hand_values():
    planes, ints = encode_input(np.array([1.0]), 4, 4)
    assert ints.tolist() == [15]
    assert planes[:, 0].tolist() == [1, 1, 1, 1]

    planes, ints = encode_input(np.array([0.0]), 4, 4)
    assert ints.tolist() == [0]
    assert planes[:, 0].tolist() == [0, 0, 0, 0]

    # 0.5 * 15 = 7.5 rounds half-up to 8 = 0b1000, LSB first
    planes, ints = encode_input(np.array([0.5]), 4, 4)
    assert ints.tolist() == [8]
    assert planes[:, 0].tolist() == [0, 0, 0, 1]


def test_encode_input_rejects_negative():
    with pytest.raises(NegativeInput):
        encode_input(np.array([-0.01]), 4, 4)


@given(st.floats(0, 1), st.floats(0, 1), st.integers(2, 8))
def test_encode_monotone(a, b, t):
    lo, hi = sorted((a, b))
    _, ints = encode_input(np.array([lo, hi]), t, t)
    assert ints[0] <= ints[1]


def test_encode_roundtrip_half_ulp():
    rng = np.random.default_rng(0)
    for t in range(2, 9):
        v = rng.random(2000)
        planes, ints = encode_input(v, t, t)
        assert np.array_equal(decode_planes(planes), ints)
        target = v * (2.0 ** t - 1.0)
        unclamped = ints < (1 << t) - 1
        assert np.all(np.abs(target[unclamped] - ints[unclamped]) <= 0.5)


def test_requantize_hand_values():
    # shift = 3 + 4 - 2 = 5; (172 + 16) >> 5 = 5
    assert requantize(172, 3, 4, 2, 4) == 5
    assert requantize(-7, 3, 4, 2, 4) == 0          # ReLU clamp
    assert requantize(10**6, 3, 4, 2, 4) == 15      # upper clamp
    assert requantize_shift(13, 0, 4) == 13         # shift 0


def test_requantize_negative_shift_rejected():
    with pytest.raises(RequantShiftError):
        requantize(100, 0, 0, 5, 4)


@given(st.integers(-2**20, 2**20), st.integers(0, 14), st.integers(1, 8))
@settings(max_examples=300)
def test_requantize_matches_rational_round_half_up(psum, shift, t):
    got = requantize_shift(psum, shift, t)
    exact = Fraction(psum, 1 << shift) + Fraction(1, 2)
    want = exact.numerator // exact.denominator  # floor(x + 1/2)
    want = min(max(want, 0), (1 << t) - 1)
    assert got == want


def test_calibration_hand_values():
    cfg = QuantConfig(bits=3, time_steps=4)
    net = make_net((1, 4, 4), [dict(kind=CONV, kernel=1, stride=1,
                                    out_channels=1)], seed=1, scale=0.2)
    # v_hat = 1.0 -> R = T
    scales = calibrate_activations(net, [np.full((1, 4, 4), 1.0)], cfg)
    assert scales[0].frac_bits == 4
    # v_hat = 6.5 -> R = 4 - 3 = 1
    scales = calibrate_activations(net, [np.full((1, 4, 4), 6.5)], cfg)
    assert scales[0].frac_bits == 1


def test_calibration_dead_layer_warns():
    cfg = QuantConfig(bits=3, time_steps=4)
    net = make_net((1, 4, 4), [
        dict(kind=CONV, kernel=1, stride=1, out_channels=1),
        dict(kind=CONV, kernel=1, stride=1, out_channels=1),
    ], seed=1)
    net.params[0].weight[:] = 0.0
    with pytest.warns(DeadLayer):
        scales = calibrate_activations(net, [np.ones((1, 4, 4))], cfg)
    assert scales[1].frac_bits == 4


def test_calibration_empty_set():
    cfg = QuantConfig()
    net = make_net((1, 4, 4), [dict(kind=CONV, kernel=1, stride=1,
                                    out_channels=1)])
    with pytest.raises(EmptyCalibrationSet):
        calibrate_activations(net, [], cfg)


def test_derive_scales_negative_shift():
    # huge cancelling weights: radix point far negative while the next layer
    # sees no activation energy, leaving a negative realignment shift
    cfg = QuantConfig(bits=3, time_steps=4)
    net = make_net((2, 4, 4), [
        dict(kind=CONV, kernel=1, stride=1, out_channels=1),
        dict(kind=CONV, kernel=1, stride=1, out_channels=1),
    ], seed=2)
    net.params[0].weight[0, 0] = 4000.0
    net.params[0].weight[0, 1] = -4000.0
    qweights = quantize_network(net, cfg)
    with pytest.warns(DeadLayer):
        act = calibrate_activations(net, [np.ones((2, 4, 4))], cfg)
    with pytest.raises(RequantShiftError):
        derive_scales(net, qweights, act, cfg)


def test_pool_scale_carries_through(lenet, lenet_calib):
    cfg = QuantConfig(bits=3, time_steps=4)
    qweights = quantize_network(lenet, cfg)
    act = calibrate_activations(lenet, lenet_calib, cfg)
    scales = derive_scales(lenet, qweights, act, cfg)
    # layer after a pool inherits the pool's input scale
    assert scales[2].in_frac_bits == scales[1].in_frac_bits
    assert scales[4].in_frac_bits == scales[3].in_frac_bits


def test_quant_report_format(lenet, lenet_calib):
    cfg = QuantConfig(bits=3, time_steps=4)
    qweights = quantize_network(lenet, cfg)
    act = calibrate_activations(lenet, lenet_calib, cfg)
    scales = derive_scales(lenet, qweights, act, cfg)
    text = quant_report(lenet, qweights, scales, cfg)
    assert "R_wgt" in text and "clamped" in text
    assert len(text.splitlines()) == 2 + len(lenet.compute_layers())


def test_quant_config_bounds():
    with pytest.raises(ValueError):
        QuantConfig(bits=0)
    with pytest.raises(ValueError):
        QuantConfig(time_steps=17)
    with pytest.raises(ValueError):
        QuantConfig(clamp_sigma=0)
