"""Machine semantics: cycle anchors, faults, determinism, work conservation."""

import numpy as np
import pytest

from conftest import make_net, oracle_out, random_net_and_design, sim_out
from spikebit import DesignVars, compile_network, simulate
from spikebit import isa, pipeline, sim
from spikebit.encode import encode_input
from spikebit.errors import PsumOverflow, SimFault
from spikebit.model import CONV, POOL
from spikebit.plan import STORAGE_STAGED


def _machine(res, x=None):
    m = sim.Machine(res.plan, res.program, sim.images_by_mem(res.plan, res.images))
    shape = res.net.input_shape
    planes, _ = encode_input(x if x is not None else np.zeros(shape),
                             pipeline.input_frac_bits(res.plan),
                             res.design.time_steps)
    sim.preload_input(m, planes)
    return m


def _compile_k5(time_steps=1, reorder=True):
    net = make_net((1, 6, 6), [dict(kind=CONV, kernel=5, stride=1,
                                    out_channels=1)], seed=0)
    rng = np.random.default_rng(0)
    return compile_network(net, DesignVars(bits=3, time_steps=time_steps),
                           [rng.random((1, 6, 6))])


def _step_until(machine, op):
    while machine.program[machine.pc].op != op:
        machine.step()


def test_proc_busy_and_naive_stall_anchor():
    res = _compile_k5()
    m = sim.Machine(res.plan, res.program_naive,
                    sim.images_by_mem(res.plan, res.images))
    sim.preload_input(m, np.zeros((1, 1, 6, 6), dtype=np.uint8))
    _step_until(m, "PROC")
    m.step()
    mod = m.modules[0]
    # a K=5 convolution row keeps the module busy exactly 8 cycles
    assert mod.busy_until - m.cycle == 8
    assert m.program[m.pc].op == "WAIT"
    before = m.cycle
    m.step()
    assert m.last_wait_stall == 8
    assert m.cycle - before == 9   # stall + 1 issue cycle


def test_overlap_stall_anchor_and_actl_cost():
    res = _compile_k5()
    m = _machine(res)
    _step_until(m, "PROC")
    m.step()
    assert m.program[m.pc].op == "ACTL"   # hoisted next-row load
    before = m.cycle
    m.step()
    assert m.cycle - before == 2          # row transfer costs exactly 2
    assert m.program[m.pc].op == "WAIT"
    m.step()
    assert m.last_wait_stall == 6         # 8-cycle busy minus the 2-cycle load


def test_wait_on_idle_module_costs_one():
    res = _compile_k5()
    m = _machine(res)
    _step_until(m, "WAIT")
    wait = m.program[m.pc]
    # drain the busy window first
    m.step()
    m.program.insert(m.pc, wait)          # re-wait on the now idle module
    before = m.cycle
    m.step()
    assert m.last_wait_stall == 0 and m.cycle - before == 1


def test_kerl_cost_is_kernel_rows():
    res = _compile_k5()
    m = _machine(res)
    _step_until(m, "KERL")
    before = m.cycle
    m.step()
    assert m.cycle - before == 5


def test_pool_busy_is_window_rows():
    net = make_net((1, 4, 4), [dict(kind=POOL, kernel=2, stride=2)])
    res = compile_network(net, DesignVars(bits=3, time_steps=2),
                          [np.random.default_rng(0).random((1, 4, 4))])
    m = _machine(res)
    _step_until(m, "PROC")
    m.step()
    assert m.modules[0].busy_until - m.cycle == 2


def test_identity_conv_returns_input_integers():
    # B=2 clamps round(0.5 * 2^2) to +1: output psum equals the input integer
    net = make_net((1, 4, 4), [dict(kind=CONV, kernel=1, stride=1,
                                    out_channels=1)])
    net.params[0].weight[:] = 0.5
    design = DesignVars(bits=2, time_steps=4)
    res = compile_network(net, design, [np.ones((1, 4, 4))])
    assert int(res.qweights[0].data.reshape(-1)[0]) == 1

    rng = np.random.default_rng(3)
    x = rng.random((1, 4, 4))
    _, ints = encode_input(x, pipeline.input_frac_bits(res.plan), 4)
    out, _, _ = simulate(res, x)
    assert out == list(ints.reshape(-1))


def test_fault_on_bad_address():
    res = _compile_k5()
    prog = list(res.program)
    idx = next(i for i, ins in enumerate(prog) if ins.op == "ACTL")
    prog[idx] = isa.actl(prog[idx].a, 4_000_000)
    with pytest.raises(SimFault) as err:
        sim.run(prog, res.plan, sim.images_by_mem(res.plan, res.images),
                np.zeros((1, 1, 6, 6), dtype=np.uint8))
    assert err.value.pc == idx


def test_fault_on_unconfigured_proc():
    res = _compile_k5()
    prog = [isa.conf(isa.P_LAYER, 0), isa.ena(isa.P_ENABLE, 0), isa.proc(1),
            isa.end()]
    with pytest.raises(SimFault):
        sim.run(prog, res.plan, {}, np.zeros((1, 1, 6, 6), dtype=np.uint8))


def test_psum_overflow_fault():
    net = make_net((1, 4, 4), [dict(kind=CONV, kernel=3, stride=1,
                                    out_channels=1)], scale=1.2)
    design = DesignVars(bits=6, time_steps=6, psum_headroom=-6)
    res = compile_network(net, design, [np.ones((1, 4, 4))])
    with pytest.raises(PsumOverflow):
        simulate(res, np.ones((1, 4, 4)))


def test_determinism():
    res = _compile_k5(time_steps=3)
    x = np.random.default_rng(8).random((1, 6, 6))
    out1, rep1 = sim_out(res, x)
    out2, rep2 = sim_out(res, x)
    assert out1 == out2
    assert rep1.to_text() == rep2.to_text()


def test_work_conserved_across_parallelism_and_order():
    net = make_net((2, 10, 10), [
        dict(kind=CONV, kernel=3, stride=1, out_channels=6),
        dict(kind=POOL, kernel=2, stride=2),
        dict(kind=CONV, kernel=3, stride=1, out_channels=4),
    ], seed=4)
    rng = np.random.default_rng(4)
    calib = [rng.random((2, 10, 10))]
    x = rng.random((2, 10, 10))

    adds = set()
    outs = set()
    for replicas in (1, 2):
        for intra in (True, False):
            res = compile_network(
                net, DesignVars(bits=4, time_steps=3, conv_replicas=replicas,
                                intra_parallel=intra), calib)
            for program in (res.program, res.program_naive):
                out, rep, _ = sim.run(
                    program, res.plan, sim.images_by_mem(res.plan, res.images),
                    pipeline.encode_for_plan(res.plan, x))
                adds.add(rep.conditional_adds)
                outs.add(tuple(out))
    assert len(adds) == 1   # conditional-add work is invariant
    assert len(outs) == 1   # and so is the functional result


def test_reorder_neutral_and_never_slower():
    for seed in range(6):
        net, design, res, x = random_net_and_design(seed)
        out_n, rep_n = sim_out(res, x, program=res.program_naive)
        out_o, rep_o = sim_out(res, x)
        assert out_n == out_o == oracle_out(res, x)
        assert rep_o.total_cycles <= rep_n.total_cycles


def test_staged_weights_cost_more_but_match():
    net = make_net((1, 8, 8), [
        dict(kind=CONV, kernel=3, stride=1, out_channels=4),
        dict(kind=CONV, kernel=3, stride=1, out_channels=6),
    ], seed=2)
    rng = np.random.default_rng(2)
    calib = [rng.random((1, 8, 8))]
    x = rng.random((1, 8, 8))

    rom = compile_network(net, DesignVars(bits=3, time_steps=3), calib)
    # both ROMs (108 + 648 bits) plus buffers (624) exceed 1300; the staged
    # fallback needs only the 648-bit maximum
    small = DesignVars(bits=3, time_steps=3, onchip_capacity_bits=1300)
    staged = compile_network(net, small, calib)
    assert staged.plan.storage_mode == STORAGE_STAGED
    assert any(i.op == "KERD" for i in staged.program)

    out_r, rep_r = sim_out(rom, x)
    out_s, rep_s = sim_out(staged, x)
    assert out_r == out_s == oracle_out(rom, x)
    assert rep_s.total_cycles > rep_r.total_cycles


def test_report_invariants(lenet_cycles):
    rep = lenet_cycles()
    assert sum(rep.layer_cycles.values()) <= rep.total_cycles
    assert (rep.communication_cycles + rep.computation_cycles
            + rep.control_cycles) == rep.total_cycles
    for mid in rep.module_busy:
        assert 0.0 <= rep.utilization(mid) <= 1.0
    assert rep.communication_floor <= rep.total_cycles
    text = rep.to_text()
    assert "instructions_per_clock" in text and "communication_floor" in text


def test_trace_records_instructions():
    res = _compile_k5()
    out, rep, machine = simulate(res, np.zeros((1, 6, 6)), trace=True)
    assert len(machine.trace) == rep.instructions
    assert machine.trace[0][0] == 0
