"""Instruction generation.

Walks each layer's loop nest and emits the program: per output-channel group,
accumulating time-step and input-channel loops run innermost (kernels are
reloaded per iteration since the time-step loop is outermost), each activation
row is processed with an explicit start/wait pair, and the group finishes with
a drain block that requantizes the accumulators into the opposite buffer.

:func:`generate` emits the naive sequential order (PROC, WAIT, next-row ACTL).
:func:`reorder_for_overlap` hoists next-row loads between a start and its wait
so the two-cycle row transfer hides inside the module's busy time; an ACTL is
never moved above the PROC that consumes the previously loaded row.
"""

from __future__ import annotations

from . import isa
from . import model as mdl
from .errors import CodegenError
from .plan import (MEM_OUTPUT, MEM_PING1D, MEM_PING2D, MEM_PONG1D, MEM_PONG2D,
                   STORAGE_STAGED, HardwarePlan)


def channel_groups(total, width):
    base = 0
    while base < total:
        n = min(width, total - base)
        yield base, n
        base += n


def _row_addr(channel, t, dim, row, time_steps):
    return (channel * time_steps + t) * dim + row


def _layer_io(net, plan):
    """Source/destination memory per compute layer (ping-pong alternation)."""
    compute = net.compute_layers()
    twod = [i for i in compute if net.layers[i].kind != mdl.LINEAR]
    oned = [i for i in compute if net.layers[i].kind == mdl.LINEAR]
    io = {}
    for pos, i in enumerate(twod):
        src = MEM_PING2D if pos % 2 == 0 else MEM_PONG2D
        dst = MEM_PONG2D if pos % 2 == 0 else MEM_PING2D
        if i == compute[-1]:
            dst = MEM_OUTPUT
        elif oned and i == twod[-1]:
            dst = MEM_PING1D
        io[i] = (src, dst)
    for pos, i in enumerate(oned):
        src = MEM_PING1D if pos % 2 == 0 else MEM_PONG1D
        dst = MEM_PONG1D if pos % 2 == 0 else MEM_PING1D
        if i == compute[-1]:
            dst = MEM_OUTPUT
        io[i] = (src, dst)
    return io


def generate(net, plan: HardwarePlan):
    """Emit the full naive-order program for a planned network."""
    design = plan.design
    t_steps = design.time_steps
    kload = isa.kerd if plan.storage_mode == STORAGE_STAGED else isa.kerl
    io = _layer_io(net, plan)
    compute = net.compute_layers()
    out = []

    for i in compute:
        spec = net.layers[i]
        scales = plan.scales[i]
        src, dst = io[i]
        raw = dst == MEM_OUTPUT

        if spec.kind == mdl.LINEAR:
            _emit_linear(out, plan, i, spec, scales, src, dst, raw, t_steps)
            continue

        pm = plan.module_for_layer(i)
        if pm is None:
            raise CodegenError(f"layer {i}: no processing module in plan")
        assign = pm.assigns[i]
        mask = 1 << pm.module_id
        replicas = pm.replicas if spec.kind == mdl.CONV else 1
        group_width = assign.parallel * replicas
        mem = plan.weight_mems.get(i)
        if spec.kind == mdl.CONV and mem is None:
            raise CodegenError(f"layer {i}: no weight memory in plan")

        out.append(isa.conf(isa.P_LAYER, i))
        out.append(isa.ena(isa.P_ENABLE,
                           (pm.module_id << 16) | ((1 << replicas) - 1)))
        out.append(isa.conf(isa.P_STRIDE, spec.stride))
        out.append(isa.conf(isa.P_PARALLEL, assign.parallel))
        out.append(isa.conf(isa.P_DIN, spec.in_dim))
        out.append(isa.conf(isa.P_DOUT, spec.out_dim))
        out.append(isa.conf(isa.P_PAD, spec.padding))
        out.append(isa.conf(isa.P_TSTEPS, t_steps))
        out.append(isa.conf(isa.P_PSUMBITS, plan.psum_bits[i]))
        out.append(isa.conf(isa.P_BUFSEL, (src << 4) | dst))
        out.append(isa.conf(isa.P_OUTMODE, 1 if raw else 0))
        if spec.kind == mdl.CONV:
            out.append(isa.conf(isa.P_SHIFT, scales.shift or 0))
            out.append(isa.conf(isa.P_WMEM, mem.mem_id))
        else:
            out.append(isa.conf(isa.P_SHIFT, scales.avg_shift))
            out.append(isa.conf(isa.P_POOLMODE,
                                1 if spec.pool_mode == mdl.POOL_MAX else 0))

        for base, n in channel_groups(spec.out_channels, group_width):
            out.append(isa.conf(isa.P_COUNT, n))
            if dst == MEM_PING1D:
                out.append(isa.conf(isa.P_BITBASE, base))
            for t in range(t_steps):
                out.append(isa.conf(isa.P_TIMESTEP, t))
                if spec.kind == mdl.CONV:
                    for c in range(spec.in_channels):
                        out.append(isa.rst(mask))
                        for j in range(n):
                            out.append(kload(mem.mem_id,
                                             (base + j) * spec.in_channels + c))
                        _emit_rows(out, pm, mask, src,
                                   [_row_addr(c, t, spec.in_dim, r, t_steps)
                                    for r in range(spec.in_dim)], 1)
                else:
                    out.append(isa.rst(mask))
                    addrs = [_row_addr(base + j, t, spec.in_dim, r, t_steps)
                             for r in range(spec.in_dim) for j in range(n)]
                    _emit_rows(out, pm, mask, src, addrs, n)
            out.append(isa.conf(isa.P_DRAIN, 0))
            _emit_drain_2d(out, spec, dst, base, n, t_steps, raw)

    out.append(isa.end())
    return isa.validate_program(out)


def _emit_rows(out, pm, mask, src, addrs, per_row):
    """Row loop: load the first window row(s), then start/wait per row."""
    rows = len(addrs) // per_row
    for k in range(per_row):
        out.append(isa.actl(src, addrs[k]))
    for r in range(rows):
        out.append(isa.proc(mask))
        out.append(isa.wait(pm.module_id))
        if r + 1 < rows:
            for k in range(per_row):
                out.append(isa.actl(src, addrs[(r + 1) * per_row + k]))


def _emit_drain_2d(out, spec, dst, base, n, t_steps, raw):
    d_out = spec.out_dim
    if raw:
        for j in range(n):
            for o in range(d_out):
                out.append(isa.acts(MEM_OUTPUT, ((base + j) * d_out + o) * d_out))
        return
    for j in range(n):
        for o in range(d_out):
            for t in range(t_steps):
                if dst == MEM_PING1D:
                    out.append(isa.acts(dst, t))
                else:
                    out.append(isa.acts(
                        dst, _row_addr(base + j, t, d_out, o, t_steps)))


def _emit_linear(out, plan, i, spec, scales, src, dst, raw, t_steps):
    pm = plan.pm_1d
    if pm is None:
        raise CodegenError(f"layer {i}: no 1D module in plan")
    mem = plan.weight_mems.get(i)
    if mem is None:
        raise CodegenError(f"layer {i}: no weight memory in plan")
    mask = 1 << pm.module_id

    out.append(isa.conf(isa.P_LAYER, i))
    out.append(isa.ena(isa.P_ENABLE, (pm.module_id << 16) | 1))
    out.append(isa.conf(isa.P_DIN, spec.features_in))
    out.append(isa.conf(isa.P_TSTEPS, t_steps))
    out.append(isa.conf(isa.P_PSUMBITS, plan.psum_bits[i]))
    out.append(isa.conf(isa.P_SHIFT, scales.shift or 0))
    out.append(isa.conf(isa.P_OUTMODE, 1 if raw else 0))
    out.append(isa.conf(isa.P_BUFSEL, (src << 4) | dst))
    out.append(isa.conf(isa.P_WMEM, mem.mem_id))

    for g, (base, n) in enumerate(channel_groups(spec.features_out,
                                                 pm.parallel_features)):
        out.append(isa.conf(isa.P_COUNT, n))
        out.append(isa.conf(isa.P_WROWBASE, g * spec.features_in))
        if not raw:
            out.append(isa.conf(isa.P_BITBASE, base))
        out.append(isa.rst(mask))
        for t in range(t_steps):
            out.append(isa.conf(isa.P_TIMESTEP, t))
            out.append(isa.actl(src, t))
            out.append(isa.lin(mask))
            out.append(isa.wait(pm.module_id))
        out.append(isa.conf(isa.P_DRAIN, 0))
        if raw:
            for j in range(n):
                out.append(isa.acts(MEM_OUTPUT, base + j))
        else:
            for t in range(t_steps):
                out.append(isa.acts(dst, t))
    return out


# ----------------------------------------------------------------------------
# Instruction reordering
# ----------------------------------------------------------------------------

def reorder_for_overlap(instrs):
    """Hoist next-row loads between PROC and WAIT to hide the transfer time.

    Only runs of ACTLs immediately following a PROC's own WAIT are moved, so
    no load ever crosses the PROC that consumes the row loaded before it.
    Returns a new program; a no-op when nothing is hoistable.
    """
    out = list(instrs)
    i = 0
    while i + 2 < len(out):
        cur, nxt = out[i], out[i + 1]
        if cur.op == "PROC" and nxt.op == "WAIT" and (cur.a >> nxt.a) & 1:
            j = i + 2
            while j < len(out) and out[j].op == "ACTL":
                j += 1
            if j > i + 2:
                out[i + 1:j] = out[i + 2:j] + [nxt]
                i = j
                continue
        i += 1
    return out


def check_start_wait_pairs(instrs):
    """Every PROC/LIN is awaited on its module before anything else touches it."""
    pending = {}
    for idx, ins in enumerate(instrs):
        if ins.op in ("PROC", "LIN"):
            for m in range(27):
                if (ins.a >> m) & 1:
                    if pending.get(m):
                        raise CodegenError(
                            f"instr {idx}: module {m} restarted before WAIT")
                    pending[m] = True
        elif ins.op == "WAIT":
            pending[ins.a] = False
        elif ins.op in ("RST", "ACTS", "KERL", "KERD", "END"):
            if any(pending.values()):
                busy = [m for m, v in pending.items() if v]
                raise CodegenError(
                    f"instr {idx}: {ins.op} while modules {busy} unawaited")
    return True
