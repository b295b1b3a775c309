"""Dynamic quantization and radix-weighted spike-train encoding.

Weights are scaled into B-bit two's-complement integers with a per-layer
radix point placed from the layer's weight statistics. Activations travel as
length-T spike trains whose step t carries weight 2^t, so a train is the
LSB-first binary expansion of a T-bit unsigned integer. Between layers the
high-precision accumulator is realigned by a right shift with conditional-add
rounding; the shift also fuses the ReLU (negative sums clamp to zero, spike
trains being unsigned).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import model as mdl
from .errors import (DeadLayer, DegenerateWeights, EmptyCalibrationSet,
                     NegativeInput, RequantShiftError)


@dataclass
class QuantConfig:
    bits: int = 3           # weight resolution B
    time_steps: int = 4     # spike train length T
    clamp_sigma: float = 3.0  # std-dev multiple kept clamp-free

    def __post_init__(self):
        if not 1 <= self.bits <= 16:
            raise ValueError(f"bits must be in [1, 16], got {self.bits}")
        if not 1 <= self.time_steps <= 16:
            raise ValueError(f"time_steps must be in [1, 16], got {self.time_steps}")
        if self.clamp_sigma <= 0:
            raise ValueError("clamp_sigma must be positive")


@dataclass
class QuantizedTensor:
    data: np.ndarray        # int64, already clamped to the B-bit range
    frac_bits: int          # radix point position (may be negative)
    bits: int
    clamped: int = 0        # values saturated during quantization


@dataclass
class ActivationScale:
    """Per-layer activation scaling derived from calibration."""

    v_hat: float            # max observed input activation (float reference)
    frac_bits: int          # T - ceil(log2 v_hat)
    in_frac_bits: int       # effective scale of the integer inputs (pools carry)


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0.0, np.floor(x + 0.5), np.ceil(x - 0.5))


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def weight_scale(weights, cfg: QuantConfig) -> int:
    """Radix point for a weight set: B - ceil(log2(|mean| + r*sigma)) - 1."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("empty weight tensor")
    spread = abs(float(w.mean())) + cfg.clamp_sigma * float(w.std())
    if spread == 0.0:
        warnings.warn("all-zero weight tensor, using maximum fraction bits",
                      DegenerateWeights)
        return cfg.bits - 1
    return cfg.bits - math.ceil(math.log2(spread)) - 1


def quantize_weights(weights, frac_bits, cfg: QuantConfig) -> QuantizedTensor:
    """Scale by 2^frac_bits, round half away from zero, clamp to B bits."""
    w = np.asarray(weights, dtype=np.float64)
    lo, hi = -(1 << (cfg.bits - 1)), (1 << (cfg.bits - 1)) - 1
    raw = round_half_away(w * float(2.0 ** frac_bits))
    clamped = int(np.count_nonzero((raw < lo) | (raw > hi)))
    data = np.clip(raw, lo, hi).astype(np.int64)
    return QuantizedTensor(data=data, frac_bits=frac_bits, bits=cfg.bits,
                           clamped=clamped)


def encode_input(x, act_frac_bits, time_steps):
    """Turn non-negative floats into T LSB-first binary spike planes.

    Returns (planes, ints): planes has shape (T, *x.shape) with 0/1 entries,
    ints is the clamped integer view round(v * (2^R - 1)).
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise NegativeInput("spike encoding requires non-negative inputs")
    target = x * float(2.0 ** act_frac_bits - 1.0)
    ints = np.clip(round_half_up(target), 0, (1 << time_steps) - 1).astype(np.int64)
    planes = np.stack([(ints >> t) & 1 for t in range(time_steps)]).astype(np.uint8)
    return planes, ints


def decode_planes(planes):
    """Inverse of encode_input's plane stacking: sum of 2^t * plane_t."""
    planes = np.asarray(planes)
    t_steps = planes.shape[0]
    return sum((planes[t].astype(np.int64) << t) for t in range(t_steps))


def requantize_shift(psum, shift, time_steps):
    """Right shift with conditional-add rounding, clamped to [0, 2^T - 1]."""
    if shift < 0:
        raise RequantShiftError(f"negative requantization shift {shift}")
    psum = np.asarray(psum, dtype=np.int64)
    if shift > 0:
        shifted = (psum + (1 << (shift - 1))) >> shift
    else:
        shifted = psum
    out = np.clip(shifted, 0, (1 << time_steps) - 1)
    return out if out.ndim else int(out)


def requantize(psum, wgt_frac_bits, act_frac_bits, next_act_frac_bits, time_steps):
    """Realign a partial sum for the next layer's activation scale."""
    shift = wgt_frac_bits + act_frac_bits - next_act_frac_bits
    return requantize_shift(psum, shift, time_steps)


# ----------------------------------------------------------------------------
# Calibration and the per-network scale table
# ----------------------------------------------------------------------------

def calibrate_activations(net, samples, cfg: QuantConfig):
    """Max input activation per compute layer over a representative dataset.

    Runs the float reference forward pass (never the quantized path) and
    returns {layer_index: ActivationScale}.
    """
    from . import reference

    samples = list(samples)
    if not samples:
        raise EmptyCalibrationSet("calibration needs at least one sample")

    compute = net.compute_layers()
    v_hat = {i: 0.0 for i in compute}
    for x in samples:
        acts, _ = reference.float_forward(net, x)
        for i in compute:
            v_hat[i] = max(v_hat[i], float(np.max(acts[i])))

    scales = {}
    prev = None
    for i in compute:
        if v_hat[i] > 0.0:
            frac = cfg.time_steps - math.ceil(math.log2(v_hat[i]))
        else:
            warnings.warn(f"layer {i} saw no activation energy during calibration",
                          DeadLayer)
            frac = cfg.time_steps
        if prev is None or net.layers[prev].kind != mdl.POOL:
            in_frac = frac
        else:
            in_frac = scales[prev].in_frac_bits   # pooling preserves scale
        scales[i] = ActivationScale(v_hat=v_hat[i], frac_bits=frac, in_frac_bits=in_frac)
        prev = i
    return scales


@dataclass
class LayerScales:
    """Everything codegen and the references need for one compute layer."""

    kind: str
    v_hat: float
    act_frac_bits: int      # Eq-4 scale of this layer's input
    in_frac_bits: int       # effective integer input scale (pools carry)
    wgt_frac_bits: int | None = None
    shift: int | None = None        # requant shift; None for pools / final layer
    avg_shift: int | None = None    # pooling divide, log2(K^2)


def quantize_network(net, cfg: QuantConfig):
    """Quantize all parameter layers; returns {layer_index: QuantizedTensor}."""
    out = {}
    for i, spec in enumerate(net.layers):
        if spec.kind in (mdl.CONV, mdl.LINEAR):
            w = net.params[i].weight
            frac = weight_scale(w, cfg)
            out[i] = quantize_weights(w, frac, cfg)
    return out


def derive_scales(net, qweights, act_scales, cfg: QuantConfig):
    """Combine weight and activation scales into the per-layer table."""
    compute = net.compute_layers()
    table = {}
    for pos, i in enumerate(compute):
        spec = net.layers[i]
        act = act_scales[i]
        entry = LayerScales(kind=spec.kind, v_hat=act.v_hat,
                            act_frac_bits=act.frac_bits,
                            in_frac_bits=act.in_frac_bits)
        if spec.kind == mdl.POOL:
            entry.avg_shift = int(math.log2(spec.kernel * spec.kernel))
        else:
            entry.wgt_frac_bits = qweights[i].frac_bits
            if pos + 1 < len(compute):
                nxt = act_scales[compute[pos + 1]]
                shift = entry.wgt_frac_bits + entry.in_frac_bits - nxt.frac_bits
                if shift < 0:
                    raise RequantShiftError(
                        f"layer {i}: shift {shift} < 0 "
                        f"(wgt {entry.wgt_frac_bits} + act {entry.in_frac_bits} "
                        f"- next {nxt.frac_bits})")
                entry.shift = shift
        table[i] = entry
    return table


def quant_report(net, qweights, scales, cfg: QuantConfig) -> str:
    """Human-readable per-layer quantization summary."""
    lines = [
        f"quantization report  (B={cfg.bits}, T={cfg.time_steps}, "
        f"r={cfg.clamp_sigma:g})",
        f"{'layer':>5}  {'kind':<7} {'R_wgt':>5} {'R_act':>5} {'R_in':>4} "
        f"{'shift':>5} {'v_hat':>12} {'clamped':>9}",
    ]
    for i in net.compute_layers():
        s = scales[i]
        q = qweights.get(i)
        r_wgt = f"{q.frac_bits:>5}" if q else "    -"
        shift = s.shift if s.shift is not None else s.avg_shift
        shift = f"{shift:>5}" if shift is not None else "    -"
        clamp = f"{q.clamped}/{q.data.size}" if q else "-"
        lines.append(f"{i:>5}  {s.kind:<7} {r_wgt} {s.act_frac_bits:>5} "
                     f"{s.in_frac_bits:>4} {shift} {s.v_hat:>12.6f} {clamp:>9}")
    return "\n".join(lines) + "\n"
