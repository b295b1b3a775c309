"""Hardware planning: module sizing, window packing, memories, buffers."""

import numpy as np
import pytest

from conftest import build_lenet, lenet_design, make_net
from spikebit import DesignVars, compile_network
from spikebit.errors import CapacityError, PlanError
from spikebit.model import CONV, POOL
from spikebit.plan import (STORAGE_ROM, STORAGE_STAGED, build_plan,
                           plan_buffers, plan_dumps, plan_loads, plan_pms,
                           utilization, weight_mem_shape)


def _scales_stub(net, design):
    """Minimal scale table: planning only reads it for completeness."""
    from spikebit.encode import LayerScales
    t = design.time_steps
    out = {}
    for i in net.compute_layers():
        kind = net.layers[i].kind
        out[i] = LayerScales(kind=kind, v_hat=1.0, act_frac_bits=t,
                             in_frac_bits=t,
                             wgt_frac_bits=None if kind == POOL else 2,
                             shift=None if kind == POOL else 1,
                             avg_shift=2 if kind == POOL else None)
    return out


def test_lenet_parallel_channels(lenet_compiled):
    plan = lenet_compiled().plan
    paras = {}
    for pm in plan.pms_2d:
        for i, a in pm.assigns.items():
            paras[i] = a.parallel
    assert [paras[i] for i in (0, 1, 2, 3, 4)] == [1, 1, 2, 2, 6]


def test_lenet_module_geometry(lenet_compiled):
    plan = lenet_compiled().plan
    by_kind = {pm.kind: pm for pm in plan.pms_2d}
    assert by_kind["conv"].rows == 5 and by_kind["conv"].width == 31
    assert by_kind["pool"].rows == 2 and by_kind["pool"].width == 14


def test_window_indices_second_conv(lenet_compiled):
    plan = lenet_compiled().plan
    conv = next(pm for pm in plan.pms_2d if pm.kind == "conv")
    a = conv.assigns[2]
    assert a.start == [0, 14] and a.end == [9, 23]


def test_lenet_utilizations(lenet, lenet_compiled):
    plan = lenet_compiled().plan
    want = {0: 90.3, 1: 100.0, 2: 64.5, 3: 71.4}
    for pm in plan.pms_2d:
        for i, a in pm.assigns.items():
            if i in want:
                assert utilization(pm, a, lenet) == pytest.approx(want[i], abs=0.1)


def test_utilization_without_intra(lenet, lenet_compiled):
    plan = lenet_compiled(intra=False).plan
    want = {0: 90.3, 1: 100.0, 2: 32.3, 3: 35.7}
    for pm in plan.pms_2d:
        for i, a in pm.assigns.items():
            assert a.parallel == 1
            if i in want:
                assert utilization(pm, a, lenet) == pytest.approx(want[i], abs=0.1)


def test_weight_mem_eq_values(lenet_compiled):
    plan = lenet_compiled().plan
    m = plan.weight_mems[2]          # 16C5: one 5x5 kernel per row at 3 bits
    assert (m.width, m.height) == (75, 96)
    assert plan.storage_mode == STORAGE_ROM
    assert plan.onchip_bits() <= 10_000_000


def test_weight_mem_minimal_case():
    net = make_net((1, 3, 3), [dict(kind=CONV, kernel=1, stride=1,
                                    out_channels=1)])
    w, h = weight_mem_shape(net.layers[0], 1, 8)
    assert (w, h) == (1, 1)


def test_lenet_buffers(lenet_compiled):
    buf = lenet_compiled().plan.buffers
    assert buf.ping2d == (32, 336)
    assert buf.pong2d == (28, 672)
    assert buf.ping1d == (120, 4)
    assert buf.pong1d == (84, 4)


def test_single_layer_pong_empty():
    net = make_net((1, 6, 6), [dict(kind=CONV, kernel=3, stride=1,
                                    out_channels=2)])
    buf = plan_buffers(net, 4)
    assert buf.ping2d == (6, 24)
    assert buf.pong2d == (0, 0)


def test_buffer_height_linear_in_time_steps():
    net = build_lenet()
    b4 = plan_buffers(net, 4)
    b8 = plan_buffers(net, 8)
    assert b8.ping2d == (b4.ping2d[0], 2 * b4.ping2d[1])
    assert b8.pong2d == (b4.pong2d[0], 2 * b4.pong2d[1])


def test_buffers_match_bruteforce():
    # independent oracle: append every map to alternating lists, take maxima
    rng = np.random.default_rng(3)
    for trial in range(20):
        d = int(rng.integers(6, 20))
        specs = []
        cur = d
        for _ in range(int(rng.integers(1, 5))):
            if cur >= 4 and rng.random() < 0.4:
                specs.append(dict(kind=POOL, kernel=2, stride=2))
                cur //= 2
            else:
                k = int(rng.integers(1, min(3, cur) + 1))
                specs.append(dict(kind=CONV, kernel=k, stride=1,
                                  out_channels=int(rng.integers(1, 5))))
                cur = cur - k + 1
        net = make_net((1, d, d), specs, seed=trial)
        t = int(rng.integers(1, 9))

        sides = [[], []]
        for pos, i in enumerate(net.compute_layers()):
            spec = net.layers[i]
            sides[pos % 2].append((spec.in_dim, spec.in_dim * spec.in_channels * t))
        want = []
        for side in sides:
            if side:
                want.append((max(w for w, _ in side), max(h for _, h in side)))
            else:
                want.append((0, 0))

        buf = plan_buffers(net, t)
        assert (buf.ping2d, buf.pong2d) == (want[0], want[1])


def test_windows_disjoint_and_fit():
    rng = np.random.default_rng(9)
    for trial in range(40):
        d = int(rng.integers(4, 24))
        k = int(rng.integers(1, min(4, d) + 1))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        specs = [dict(kind=CONV, kernel=k, stride=stride, padding=pad,
                      out_channels=2)]
        try:
            net = make_net((1, d, d), specs, seed=trial)
        except Exception:
            continue
        pms, _ = plan_pms(net, DesignVars(bits=3, time_steps=4))
        for pm in pms:
            for a in pm.assigns.values():
                for p in range(a.parallel):
                    assert a.end[p] <= pm.width - 1
                    if p:
                        assert a.start[p] > a.end[p - 1]


def test_util_with_intra_geq_without(lenet, lenet_compiled):
    with_p = lenet_compiled().plan
    without = lenet_compiled(intra=False).plan
    for pm_w, pm_wo in zip(with_p.pms_2d, without.pms_2d):
        for i in pm_w.assigns:
            assert (utilization(pm_w, pm_w.assigns[i], lenet)
                    >= utilization(pm_wo, pm_wo.assigns[i], lenet))


def test_later_layer_wider_than_module():
    net = make_net((1, 10, 10), [
        dict(kind=CONV, kernel=3, stride=2, padding=0, out_channels=2),  # 10->4
        dict(kind=CONV, kernel=3, stride=1, padding=2, out_channels=2),  # 4->6
    ])
    with pytest.raises(PlanError):
        plan_pms(net, DesignVars(bits=3, time_steps=4))


def test_capacity_fallback_to_staged():
    net = build_lenet()
    design = lenet_design()
    # LeNet needs ~188k ROM bits + ~30k buffer bits; squeeze below the sum
    design.onchip_capacity_bits = 200_000
    scales = _scales_stub(net, design)
    plan = build_plan(net, design, scales)
    assert plan.storage_mode == STORAGE_STAGED
    assert plan.staging == (75, 1920)  # maxima over Eq-3 shapes


def test_capacity_error_when_staging_oversized():
    net = build_lenet()
    design = lenet_design()
    design.onchip_capacity_bits = 60_000
    with pytest.raises(CapacityError):
        build_plan(net, design, _scales_stub(net, design))


def test_pool_modules_never_replicate(lenet_compiled):
    plan = lenet_compiled(replicas=4).plan
    for pm in plan.pms_2d:
        if pm.kind == "pool":
            assert pm.replicas == 1
        else:
            assert pm.replicas == 4


def test_plan_serialization_roundtrip(lenet_compiled):
    plan = lenet_compiled().plan
    text = plan_dumps(plan)
    again = plan_dumps(plan_loads(text))
    assert text == again


def test_plan_deterministic(lenet, lenet_calib):
    a = compile_network(build_lenet(), lenet_design(), lenet_calib)
    b = compile_network(build_lenet(), lenet_design(), lenet_calib)
    assert plan_dumps(a.plan) == plan_dumps(b.plan)


def test_bias_rejected_by_hardware_path():
    net = make_net((1, 6, 6), [dict(kind=CONV, kernel=3, stride=1,
                                    out_channels=2)])
    net.params[0].bias = np.zeros(2, dtype=np.float32)
    design = DesignVars()
    with pytest.raises(PlanError):
        build_plan(net, design, _scales_stub(net, design))


def test_natural_width_gives_same_parallel_counts(lenet, lenet_calib):
    # without the width override, Alg-1 sizing still packs (1,1,2,2,6)
    design = lenet_design()
    design.pm_width = {}
    res = compile_network(lenet, design, lenet_calib)
    paras = {i: a.parallel for pm in res.plan.pms_2d
             for i, a in pm.assigns.items()}
    assert [paras[i] for i in (0, 1, 2, 3, 4)] == [1, 1, 2, 2, 6]
    conv = next(pm for pm in res.plan.pms_2d if pm.kind == "conv")
    assert conv.width == 28
