"""Shared fixtures: the LeNet-style fixture model, tiny nets, fuzz helpers."""

import numpy as np
import pytest

from spikebit import DesignVars, compile_network, simulate
from spikebit import pipeline, reference
from spikebit.errors import PlanError, RequantShiftError
from spikebit.model import (CONV, FLATTEN, LINEAR, POOL, LayerSpec, Network,
                            Params, validate)


def build_lenet(seed=42):
    """LeNet-5 architecture with deterministic pseudo-random weights."""
    rng = np.random.default_rng(seed)
    layers = [
        LayerSpec(CONV, kernel=5, stride=1, padding=0, out_channels=6),
        LayerSpec(POOL, kernel=2, stride=2, pool_mode="avg"),
        LayerSpec(CONV, kernel=5, stride=1, padding=0, out_channels=16),
        LayerSpec(POOL, kernel=2, stride=2, pool_mode="avg"),
        LayerSpec(CONV, kernel=5, stride=1, padding=0, out_channels=120),
        LayerSpec(FLATTEN),
        LayerSpec(LINEAR, features_out=84),
        LayerSpec(LINEAR, features_out=10),
    ]
    net = Network("lenet5", (1, 32, 32), layers)
    shapes = {0: (6, 1, 5, 5), 2: (16, 6, 5, 5), 4: (120, 16, 5, 5),
              6: (84, 120), 7: (10, 84)}
    for i, shape in shapes.items():
        net.params[i] = Params(rng.normal(0.0, 0.2, shape).astype(np.float32))
    return validate(net)


def lenet_design(replicas=1, intra=True):
    """Reference design point: 3-bit weights, 4 time steps, module width 31."""
    return DesignVars(bits=3, time_steps=4, clamp_sigma=3.0,
                      conv_replicas=replicas, intra_parallel=intra,
                      pm_width={"conv:5": 31})


def make_net(input_shape, specs, seed=0, scale=0.3):
    """Assemble a network, filling conv/linear weights from a seeded rng."""
    from spikebit.model import infer_shapes
    rng = np.random.default_rng(seed)
    net = infer_shapes(Network("testnet", input_shape,
                               [LayerSpec(**s) for s in specs]))
    for i, spec in enumerate(net.layers):
        if spec.kind == CONV:
            shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
            net.params[i] = Params(rng.normal(0, scale, shape).astype(np.float32))
        elif spec.kind == LINEAR:
            shape = (spec.features_out, spec.features_in)
            net.params[i] = Params(rng.normal(0, scale, shape).astype(np.float32))
    return validate(net)


def oracle_out(result, x):
    """Flat integer output of the reference quantized forward pass."""
    planes = pipeline.encode_for_plan(result.plan, x)
    if planes.ndim == 2:
        planes = planes.reshape(planes.shape[0], -1, 1, 1)
    _, out = reference.quantized_forward(
        result.net, result.qweights, result.scales, planes,
        result.design.quant(), headroom=result.design.psum_headroom)
    return list(np.asarray(out).reshape(-1))


def sim_out(result, x, program=None):
    out, report, _ = simulate(result, x, program=program)
    return list(out), report


def random_net_and_design(seed, max_dim=16, max_layers=4):
    """Deterministic fuzz case: random valid network plus design point.

    Retries on plans the mapper legitimately rejects (first-layer width rule,
    negative requant shift) by perturbing the seed.
    """
    for attempt in range(40):
        rng = np.random.default_rng(hash((seed, attempt)) % (2**32))
        try:
            return _random_case(rng, max_dim, max_layers)
        except (PlanError, RequantShiftError, ValueError):
            continue
    raise RuntimeError(f"seed {seed}: no valid fuzz case found")


def _random_case(rng, max_dim, max_layers):
    c = int(rng.integers(1, 4))
    d0 = int(rng.integers(6, max_dim + 1))
    d = d0
    specs = []
    n_layers = int(rng.integers(1, max_layers + 1))
    want_linear = rng.random() < 0.35 and n_layers >= 2
    n_2d = max(1, n_layers - (2 if want_linear else 0))
    for pos in range(n_2d):
        if pos > 0 and d >= 4 and rng.random() < 0.4:
            mode = "max" if rng.random() < 0.5 else "avg"
            specs.append(dict(kind=POOL, kernel=2, stride=2, pool_mode=mode))
            d //= 2
            continue
        k = int(rng.integers(1, min(4, d) + 1))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2)) if k > 1 else 0
        d_out = (d + 2 * pad - k) // stride + 1
        if d_out < 1:
            k, stride, pad = 1, 1, 0
            d_out = d
        specs.append(dict(kind=CONV, kernel=k, stride=stride, padding=pad,
                          out_channels=int(rng.integers(1, 7))))
        d = d_out
    if want_linear:
        if d > 1:
            specs.append(dict(kind=CONV, kernel=d, stride=1, padding=0,
                              out_channels=int(rng.integers(2, 7))))
            d = 1
        specs.append(dict(kind=FLATTEN))
        specs.append(dict(kind=LINEAR, features_out=int(rng.integers(2, 9))))

    net = make_net((c, d0, d0), specs, seed=int(rng.integers(0, 2**31)),
                   scale=0.35)
    design = DesignVars(
        bits=int(rng.integers(2, 7)), time_steps=int(rng.integers(2, 7)),
        conv_replicas=int(rng.integers(1, 3)),
        lin_parallel=int(rng.integers(2, 9)))
    calib = [rng.random(net.input_shape) for _ in range(2)]
    result = compile_network(net, design, calib)
    x = rng.random(net.input_shape)
    return net, design, result, x


@pytest.fixture(scope="session")
def lenet():
    return build_lenet()


@pytest.fixture(scope="session")
def lenet_calib():
    rng = np.random.default_rng(7)
    return [rng.random((1, 32, 32)) for _ in range(4)]


@pytest.fixture(scope="session")
def lenet_compiled(lenet, lenet_calib):
    """Memoized LeNet compiles keyed by (replicas, intra_parallel)."""
    cache = {}

    def get(replicas=1, intra=True):
        key = (replicas, intra)
        if key not in cache:
            cache[key] = compile_network(lenet, lenet_design(replicas, intra),
                                         lenet_calib)
        return cache[key]

    return get


@pytest.fixture(scope="session")
def lenet_cycles(lenet_compiled):
    """Memoized zero-input simulations (cycle counts are data-independent)."""
    cache = {}
    zero = np.zeros((1, 32, 32))

    def get(replicas=1, intra=True, reorder=True):
        key = (replicas, intra, reorder)
        if key not in cache:
            res = lenet_compiled(replicas, intra)
            prog = res.program if reorder else res.program_naive
            _, report, _ = simulate(res, zero, program=prog)
            cache[key] = report
        return cache[key]

    return get
