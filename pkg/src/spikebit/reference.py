"""Independent reference forward passes.

Two deliberately loop-naive implementations used as ground truth:

* :func:`float_forward` runs the network in float64 (calibration, accuracy
  deltas, exporter cross-checks).
* :func:`quantized_forward` runs the exact integer pipeline: B-bit weights
  against T-bit activation integers with full-precision accumulation and the
  shared requantization rule. Multiplying a weight by a T-bit activation is
  mathematically identical to the hardware's bit-serial conditional
  accumulation summed over time steps with 2^t weights, but the code paths
  share nothing with the simulator.
"""

from __future__ import annotations

import math

import numpy as np

from . import encode
from . import model as mdl
from .errors import PsumOverflow, ShapeError


def _check_input(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(net.input_shape):
        raise ShapeError(f"input shape {x.shape} != {tuple(net.input_shape)}")
    return x


def float_forward(net, x):
    """Plain float64 forward pass; ReLU after every conv/linear except the last.

    Returns (acts, out) where acts[i] is the float input seen by compute
    layer i and out is the final layer's raw output.
    """
    x = _check_input(net, x)
    compute = net.compute_layers()
    acts = {}
    cur = x
    for i, spec in enumerate(net.layers):
        is_last = compute and i == compute[-1]
        if spec.kind == mdl.FLATTEN:
            cur = cur.reshape(-1)
            continue
        acts[i] = cur
        if spec.kind == mdl.CONV:
            w = net.params[i].weight.astype(np.float64)
            b = net.params[i].bias
            k, s, p, d_out = spec.kernel, spec.stride, spec.padding, spec.out_dim
            xin = np.pad(cur, ((0, 0), (p, p), (p, p))) if p else cur
            out = np.zeros((spec.out_channels, d_out, d_out))
            for oc in range(spec.out_channels):
                for o in range(d_out):
                    for c in range(d_out):
                        win = xin[:, o * s:o * s + k, c * s:c * s + k]
                        out[oc, o, c] = np.sum(w[oc] * win)
                if b is not None:
                    out[oc] += float(b[oc])
            cur = out if is_last else np.maximum(out, 0.0)
        elif spec.kind == mdl.POOL:
            k, d_out = spec.kernel, spec.out_dim
            out = np.zeros((spec.out_channels, d_out, d_out))
            for o in range(d_out):
                for c in range(d_out):
                    win = cur[:, o * k:o * k + k, c * k:c * k + k]
                    if spec.pool_mode == mdl.POOL_MAX:
                        out[:, o, c] = win.max(axis=(1, 2))
                    else:
                        out[:, o, c] = win.mean(axis=(1, 2))
            cur = out
        else:  # linear
            w = net.params[i].weight.astype(np.float64)
            out = w @ cur
            if net.params[i].bias is not None:
                out = out + net.params[i].bias.astype(np.float64)
            cur = out if is_last else np.maximum(out, 0.0)
    return acts, cur


def _psum_limit(fan_in, bits, time_steps, headroom):
    width = bits + time_steps + math.ceil(math.log2(fan_in)) + headroom
    return 1 << (width - 1)


def _check_psum(psum, limit, layer):
    if int(np.max(np.abs(psum))) >= limit:
        raise PsumOverflow(f"layer {layer}: partial sum exceeds planned width")


def _quant_bias(params, i, qw, in_frac, cfg):
    """Bias extension: same quantization rule as weights, applied at psum scale."""
    p = params.get(i)
    b = p.bias if p is not None else None
    if b is None:
        return None
    qb = encode.quantize_weights(b, qw.frac_bits, cfg)
    return qb.data << in_frac


def quantized_forward(net, qweights, scales, planes, cfg, headroom=2):
    """Exact integer forward pass over spike planes.

    planes: (T, C, H, W) binary input planes (or (T, F) for 1D-only nets).
    Returns (acts, out): acts[i] is the integer input tensor of compute layer
    i, out the final layer's raw accumulator values (np.int64).
    """
    compute = net.compute_layers()
    cur = encode.decode_planes(planes)
    if cur.shape != tuple(net.input_shape):
        raise ShapeError(f"input shape {cur.shape} != {tuple(net.input_shape)}")

    acts = {}
    for i, spec in enumerate(net.layers):
        is_last = i == compute[-1]
        if spec.kind == mdl.FLATTEN:
            cur = cur.reshape(-1)
            continue
        acts[i] = cur
        s_tab = scales[i]
        if spec.kind == mdl.CONV:
            qw = qweights[i]
            w = qw.data
            k, st, p, d_out = spec.kernel, spec.stride, spec.padding, spec.out_dim
            limit = _psum_limit(spec.in_channels * k * k, cfg.bits,
                                cfg.time_steps, headroom)
            xin = np.pad(cur, ((0, 0), (p, p), (p, p))) if p else cur
            psum = np.zeros((spec.out_channels, d_out, d_out), dtype=np.int64)
            for oc in range(spec.out_channels):
                for o in range(d_out):
                    for c in range(d_out):
                        win = xin[:, o * st:o * st + k, c * st:c * st + k]
                        psum[oc, o, c] = int(np.sum(w[oc] * win))
            bias = _quant_bias(net.params, i, qw, s_tab.in_frac_bits, cfg)
            if bias is not None:
                psum += bias[:, None, None]
            _check_psum(psum, limit, i)
            cur = psum if is_last else encode.requantize_shift(
                psum, s_tab.shift, cfg.time_steps)
        elif spec.kind == mdl.POOL:
            k, d_out = spec.kernel, spec.out_dim
            out = np.zeros((spec.out_channels, d_out, d_out), dtype=np.int64)
            for o in range(d_out):
                for c in range(d_out):
                    win = cur[:, o * k:o * k + k, c * k:c * k + k]
                    if spec.pool_mode == mdl.POOL_MAX:
                        out[:, o, c] = win.max(axis=(1, 2))
                    else:
                        out[:, o, c] = encode.requantize_shift(
                            win.sum(axis=(1, 2)), s_tab.avg_shift, cfg.time_steps)
            cur = out
        else:  # linear
            qw = qweights[i]
            limit = _psum_limit(spec.features_in, cfg.bits, cfg.time_steps, headroom)
            psum = (qw.data @ cur).astype(np.int64)
            bias = _quant_bias(net.params, i, qw, s_tab.in_frac_bits, cfg)
            if bias is not None:
                psum += bias
            _check_psum(psum, limit, i)
            cur = psum if is_last else encode.requantize_shift(
                psum, s_tab.shift, cfg.time_steps)
    return acts, cur
