"""Deterministic machine simulator: functional emulation plus cycle costs.

The decoder is scalar and unpipelined: instructions execute one at a time and
every instruction has a fixed issue cost. Processing modules run concurrently
with the decoder through a busy window; a WAIT stalls until the window closes.

Cycle model:

    ENA/CONF/RST/END  1 cycle
    PROC              1 cycle issue; module busy K + 3 (conv) or K (pool)
    LIN               1 cycle issue; module busy F_in + 3 (weight streaming)
    KERL              K cycles (one kernel row per cycle from the ROM row)
    KERD              K * (1 + dram_penalty) cycles
    ACTL/ACTS         2 cycles (row transfer)
    WAIT              1 + remaining busy of the target module

For the roofline split, stall cycles are attributed to the phase the module
is in: the K kernel-column cycles count as computation, the 3-cycle pipeline
tail as control, and 1D weight streaming as communication (it is bound by
memory bandwidth, not arithmetic). communication_floor = total - computation.

Functional semantics are exact integer arithmetic; simulator outputs are
bit-compared against the independent reference in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import isa
from .errors import PsumOverflow, SimFault
from .plan import (MEM_OUTPUT, MEM_PING1D, MEM_PING2D, MEM_PONG1D,
                   MEM_PONG2D, HardwarePlan, decode_rom_field)

PROC_PIPELINE_TAIL = 3

CONTROL = "control"
COMPUTE = "computation"
TRANSFER = "communication"


class _Memory:
    __slots__ = ("width", "height", "rows")

    def __init__(self, width, height):
        self.width = width
        self.height = height
        self.rows = [0] * height


class _Module:
    """Shared bookkeeping for 2D and 1D processing modules."""

    def __init__(self, module_id, kind, rows, width, act_width, replicas,
                 parallel_features=0):
        self.module_id = module_id
        self.kind = kind                    # conv | pool | linear
        self.rows = rows                    # Y (kernel rows); 0 for linear
        self.width = width                  # X; 0 for linear
        self.act_width = act_width
        self.replicas = replicas
        self.parallel_features = parallel_features

        # Config registers (written by CONF while this module is active).
        self.stride = 1
        self.parallel = 0
        self.din = 0
        self.dout = 0
        self.pad = 0
        self.tsteps = 0
        self.timestep = 0
        self.shift = 0
        self.count = 0
        self.bitbase = 0
        self.outmode = 0
        self.poolmode = 0
        self.psumbits = 0
        self.wmem = -1
        self.wrowbase = 0
        self.bufsel = 0
        self.enable_mask = 0

        # Execution state.
        self.kernels = []
        self.kfill = 0
        self.row_reg = 0
        self.slot_rows = []
        self.rowslot = 0
        self.row_ctr = 0
        self.plane_reg = 0
        self.psum = None            # conv / pool-avg: [count][dout][dout]
        self.vdec = None            # pool-max decode accumulators [count][din][din]
        self.psum1 = None           # linear: [count]
        self.drain_ptr = 0
        self.busy_until = 0
        self.busy_started = 0
        self.phase1_end = 0
        self.busy_total = 0

    def idle_at(self, cycle):
        return cycle >= self.busy_until

    def psum_limit(self):
        return 1 << (self.psumbits - 1) if self.psumbits else None


@dataclass
class SimReport:
    total_cycles: int = 0
    instructions: int = 0
    clock_mhz: float = 200.0
    communication_cycles: int = 0
    computation_cycles: int = 0
    control_cycles: int = 0
    conditional_adds: int = 0
    layer_cycles: dict = field(default_factory=dict)
    module_busy: dict = field(default_factory=dict)

    @property
    def latency_us(self):
        return self.total_cycles / self.clock_mhz

    @property
    def instructions_per_clock(self):
        return self.instructions / self.total_cycles if self.total_cycles else 0.0

    @property
    def communication_floor(self):
        """Cycles left if arithmetic were free: the memory-bound latency."""
        return self.total_cycles - self.computation_cycles

    def utilization(self, module_id):
        busy = self.module_busy.get(module_id, 0)
        return busy / self.total_cycles if self.total_cycles else 0.0

    def to_text(self):
        lines = [
            f"total_cycles            {self.total_cycles}",
            f"latency_us              {self.latency_us:.3f}",
            f"clock_mhz               {self.clock_mhz:g}",
            f"instructions            {self.instructions}",
            f"instructions_per_clock  {self.instructions_per_clock:.4f}",
            f"communication_cycles    {self.communication_cycles}",
            f"computation_cycles      {self.computation_cycles}",
            f"control_cycles          {self.control_cycles}",
            f"communication_floor     {self.communication_floor}",
            f"conditional_adds        {self.conditional_adds}",
            "layer_cycles:",
        ]
        for layer, cyc in sorted(self.layer_cycles.items()):
            lines.append(f"  layer {layer:<3d} {cyc}")
        lines.append("module_utilization:")
        for mid, busy in sorted(self.module_busy.items()):
            lines.append(f"  module {mid}  busy {busy}  "
                         f"util {self.utilization(mid):.3f}")
        return "\n".join(lines) + "\n"


class Machine:
    """Decoder, memories and processing modules for one program execution."""

    def __init__(self, plan: HardwarePlan, program, images, trace=False):
        self.plan = plan
        self.program = list(program)
        self.bits = plan.design.bits
        self.dram_penalty = plan.design.dram_penalty
        self.pc = 0
        self.cycle = 0
        self.halted = False
        self.active = None
        self.current_layer = -1
        self.last_wait_stall = 0
        self.trace = [] if trace else None

        b = plan.buffers
        self.mems = {
            MEM_PING2D: _Memory(*b.ping2d),
            MEM_PONG2D: _Memory(*b.pong2d),
            MEM_PING1D: _Memory(*b.ping1d),
            MEM_PONG1D: _Memory(*b.pong1d),
        }
        self.images = dict(images)
        self.output = {}

        self.modules = {}
        for pm in plan.pms_2d:
            self.modules[pm.module_id] = _Module(
                pm.module_id, pm.kind, pm.rows, pm.width, pm.act_width,
                pm.replicas)
        if plan.pm_1d:
            self.modules[plan.pm_1d.module_id] = _Module(
                plan.pm_1d.module_id, "linear", 0, 0, 0, 1,
                parallel_features=plan.pm_1d.parallel_features)

        self.report = SimReport(clock_mhz=plan.design.clock_mhz)

    # -- helpers -------------------------------------------------------------

    def _fault(self, msg):
        raise SimFault(msg, cycle=self.cycle, pc=self.pc)

    def _charge(self, cycles, category):
        self.cycle += cycles
        self.report.layer_cycles[self.current_layer] = (
            self.report.layer_cycles.get(self.current_layer, 0) + cycles)
        if category == TRANSFER:
            self.report.communication_cycles += cycles
        elif category == COMPUTE:
            self.report.computation_cycles += cycles
        else:
            self.report.control_cycles += cycles

    def _buffer(self, mem_id):
        m = self.mems.get(mem_id)
        if m is None:
            self._fault(f"memory {mem_id} is not an activation buffer")
        return m

    def _active(self):
        if self.active is None:
            self._fault("no module enabled")
        return self.active

    def _selected(self, mask):
        mods = [m for mid, m in self.modules.items() if (mask >> mid) & 1]
        if not mods:
            self._fault(f"command mask {mask:#x} selects no module")
        return mods

    # -- instruction handlers ------------------------------------------------

    def step(self):
        """Execute one instruction and advance the cycle counter."""
        if self.halted:
            self._fault("machine halted")
        if not 0 <= self.pc < len(self.program):
            self._fault("program counter out of range")
        ins = self.program[self.pc]
        if self.trace is not None:
            self.trace.append((self.cycle, self.pc, isa.format_instruction(ins)))
        handler = getattr(self, f"_op_{ins.op.lower()}")
        handler(ins)
        self.report.instructions += 1
        self.pc += 1

    def run(self):
        while not self.halted:
            self.step()
        self.report.total_cycles = self.cycle
        for mid, mod in self.modules.items():
            self.report.module_busy[mid] = mod.busy_total
        return self.report

    def _op_ena(self, ins):
        if ins.a == isa.P_ENABLE:
            mid = ins.b >> 16
            if mid not in self.modules:
                self._fault(f"ENA of unknown module {mid}")
            self.active = self.modules[mid]
            self.active.enable_mask = ins.b & 0xFFFF
        else:
            self._op_conf(ins)
            return
        self._charge(1, CONTROL)

    _CONF_FIELDS = {
        isa.P_STRIDE: "stride", isa.P_PARALLEL: "parallel",
        isa.P_SHIFT: "shift", isa.P_BUFSEL: "bufsel", isa.P_WMEM: "wmem",
        isa.P_BITBASE: "bitbase", isa.P_COUNT: "count", isa.P_TSTEPS: "tsteps",
        isa.P_TIMESTEP: "timestep", isa.P_DIN: "din", isa.P_DOUT: "dout",
        isa.P_PAD: "pad", isa.P_POOLMODE: "poolmode", isa.P_OUTMODE: "outmode",
        isa.P_WROWBASE: "wrowbase", isa.P_PSUMBITS: "psumbits",
    }

    def _op_conf(self, ins):
        if ins.a == isa.P_LAYER:
            self.current_layer = ins.b
            self._charge(1, CONTROL)
            return
        if ins.a == isa.P_ENABLE:
            self._op_ena(ins)
            return
        mod = self._active()
        if ins.a == isa.P_DRAIN:
            mod.drain_ptr = 0
        else:
            name = self._CONF_FIELDS.get(ins.a)
            if name is None:
                self._fault(f"CONF of unknown parameter {ins.a}")
            if not mod.idle_at(self.cycle):
                self._fault(f"CONF p={ins.a} while module {mod.module_id} busy")
            setattr(mod, name, ins.b)
        self._charge(1, CONTROL)

    def _op_rst(self, ins):
        for mod in self._selected(ins.a):
            if not mod.idle_at(self.cycle):
                self._fault(f"RST while module {mod.module_id} busy")
            mod.kfill = 0
            mod.row_ctr = 0
            mod.rowslot = 0
            mod.row_reg = 0
            mod.slot_rows = [0] * max(1, mod.count)
            mod.kernels = [None] * max(1, mod.count)
        self._charge(1, CONTROL)

    def _op_end(self, _ins):
        self.halted = True
        self._charge(1, CONTROL)

    def _op_kerl(self, ins, penalty=0):
        mod = self._active()
        if mod.kind == "linear":
            self._fault("kernel load to the 1D module")
        if not mod.idle_at(self.cycle):
            self._fault("kernel load while module busy")
        rows = self.images.get(ins.a)
        if rows is None:
            self._fault(f"memory {ins.a} holds no kernels")
        if not 0 <= ins.b < len(rows):
            self._fault(f"kernel address {ins.b} out of range")
        if mod.kfill >= mod.count:
            self._fault("more kernels loaded than active windows")
        k = mod.rows
        word = rows[ins.b]
        mod.kernels[mod.kfill] = [
            [decode_rom_field(word, ky * k + kx, self.bits) for kx in range(k)]
            for ky in range(k)]
        mod.kfill += 1
        self._charge(k * (1 + penalty), TRANSFER)

    def _op_kerd(self, ins):
        self._op_kerl(ins, penalty=self.dram_penalty)

    def _op_actl(self, ins):
        mod = self._active()
        mem = self._buffer(ins.a)
        if not 0 <= ins.b < mem.height:
            self._fault(f"ACTL address {ins.b} out of range for memory {ins.a}")
        bits = mem.rows[ins.b]
        if mod.kind == "linear":
            mod.plane_reg = bits
        elif mod.kind == "pool":
            if mod.rowslot >= max(1, mod.count):
                self._fault("row load past the active window count")
            mod.slot_rows[mod.rowslot] = bits
            mod.rowslot += 1
        else:
            mod.row_reg = bits
        self._charge(2, TRANSFER)

    def _op_wait(self, ins):
        mod = self.modules.get(ins.a)
        if mod is None:
            self._fault(f"WAIT on unknown module {ins.a}")
        if ins.b != 0:
            self._fault(f"WAIT condition {ins.b} undefined")
        stall = max(0, mod.busy_until - self.cycle)
        self.last_wait_stall = stall
        if stall:
            comp = max(0, min(mod.phase1_end, mod.busy_until) - self.cycle)
            tail = stall - comp
            phase1_cat = TRANSFER if mod.kind == "linear" else COMPUTE
            if comp:
                self._charge(comp, phase1_cat)
            if tail:
                self._charge(tail, CONTROL)
        self._charge(1, CONTROL)

    # -- processing ----------------------------------------------------------

    def _alloc_accumulators(self, mod):
        n = mod.count
        if mod.kind == "linear":
            if mod.psum1 is None or len(mod.psum1) != n:
                if mod.psum1 is not None and any(mod.psum1):
                    self._fault("group shape changed with undrained accumulators")
                mod.psum1 = [0] * n
            return
        if mod.kind == "pool" and mod.poolmode == 1:
            if (mod.vdec is None or len(mod.vdec) != n
                    or len(mod.vdec[0]) != mod.din):
                if mod.vdec is not None and any(
                        v for sl in mod.vdec for row in sl for v in row):
                    self._fault("group shape changed with undrained accumulators")
                mod.vdec = [[[0] * mod.din for _ in range(mod.din)]
                            for _ in range(n)]
            return
        if (mod.psum is None or len(mod.psum) != n
                or len(mod.psum[0]) != mod.dout):
            if mod.psum is not None and any(
                    v for sl in mod.psum for row in sl for v in row):
                self._fault("group shape changed with undrained accumulators")
            mod.psum = [[[0] * mod.dout for _ in range(mod.dout)]
                        for _ in range(n)]

    def _op_proc(self, ins):
        adds = 0
        for mod in self._selected(ins.a):
            if mod.kind == "linear":
                self._fault("PROC commands a 1D module")
            if not mod.idle_at(self.cycle):
                self._fault(f"PROC while module {mod.module_id} busy")
            if mod.count < 1 or mod.dout < 1 or mod.din < 1 or mod.tsteps < 1:
                self._fault(f"PROC on unconfigured module {mod.module_id}")
            self._alloc_accumulators(mod)
            if mod.kind == "conv":
                adds += self._conv_row(mod)
            else:
                adds += self._pool_row(mod)
            busy = mod.rows + (PROC_PIPELINE_TAIL if mod.kind == "conv" else 0)
            mod.busy_started = self.cycle + 1
            mod.phase1_end = mod.busy_started + mod.rows
            mod.busy_until = mod.busy_started + busy
            mod.busy_total += busy
        self.report.conditional_adds += adds
        self._charge(1, CONTROL)

    def _conv_row(self, mod):
        """Accumulate one input row: conditional adds of B-bit weights scaled 2^t."""
        r = mod.row_ctr
        mod.row_ctr += 1
        row = mod.row_reg
        t = mod.timestep
        k, stride, pad = mod.rows, mod.stride, mod.pad
        din, dout = mod.din, mod.dout
        limit = mod.psum_limit()
        adds = 0
        for ky in range(k):
            num = r + pad - ky
            if num < 0 or num % stride:
                continue
            o = num // stride
            if o >= dout:
                continue
            for j in range(mod.count):
                if mod.kernels[j] is None:
                    self._fault(f"window {j} has no kernel loaded")
                krow = mod.kernels[j][ky]
                ps = mod.psum[j][o]
                for x in range(dout):
                    base = x * stride - pad
                    acc = 0
                    for kx in range(k):
                        col = base + kx
                        if 0 <= col < din and (row >> col) & 1:
                            acc += krow[kx]
                            adds += 1
                    if acc:
                        v = ps[x] + (acc << t)
                        if limit and not -limit <= v < limit:
                            raise PsumOverflow(
                                f"module {mod.module_id} psum overflow",
                                cycle=self.cycle, pc=self.pc)
                        ps[x] = v
        return adds

    def _pool_row(self, mod):
        r = mod.row_ctr
        mod.row_ctr += 1
        mod.rowslot = 0
        t = mod.timestep
        k, din, dout = mod.rows, mod.din, mod.dout
        adds = 0
        for j in range(mod.count):
            row = mod.slot_rows[j]
            if mod.poolmode == 1:
                vrow = mod.vdec[j][r] if r < din else None
                if vrow is None:
                    self._fault("pool row counter past the input height")
                for col in range(din):
                    if (row >> col) & 1:
                        vrow[col] += 1 << t
                        adds += 1
            else:
                if r // k >= dout:
                    continue
                ps = mod.psum[j][r // k]
                for x in range(dout):
                    acc = 0
                    for kx in range(k):
                        if (row >> (x * k + kx)) & 1:
                            acc += 1
                            adds += 1
                    if acc:
                        ps[x] += acc << t
        return adds

    def _op_lin(self, ins):
        adds = 0
        for mod in self._selected(ins.a):
            if mod.kind != "linear":
                self._fault("LIN commands a 2D module")
            if not mod.idle_at(self.cycle):
                self._fault("LIN while module busy")
            if mod.count < 1 or mod.din < 1 or mod.tsteps < 1:
                self._fault("LIN on unconfigured module")
            rows = self.images.get(mod.wmem)
            if rows is None:
                self._fault(f"memory {mod.wmem} holds no weights")
            self._alloc_accumulators(mod)
            t = mod.timestep
            limit = mod.psum_limit()
            plane = mod.plane_reg
            for i in range(mod.din):
                if not (plane >> i) & 1:
                    continue
                addr = mod.wrowbase + i
                if not 0 <= addr < len(rows):
                    self._fault(f"weight row {addr} out of range")
                word = rows[addr]
                for j in range(mod.count):
                    v = mod.psum1[j] + (decode_rom_field(word, j, self.bits) << t)
                    if limit and not -limit <= v < limit:
                        raise PsumOverflow("1D module psum overflow",
                                           cycle=self.cycle, pc=self.pc)
                    mod.psum1[j] = v
                    adds += 1
            busy = mod.din + PROC_PIPELINE_TAIL
            mod.busy_started = self.cycle + 1
            mod.phase1_end = mod.busy_started + mod.din
            mod.busy_until = mod.busy_started + busy
            mod.busy_total += busy
        self.report.conditional_adds += adds
        self._charge(1, CONTROL)

    # -- drains ----------------------------------------------------------------

    def _requant(self, value, mod):
        if mod.shift > 0:
            value = (value + (1 << (mod.shift - 1))) >> mod.shift
        return min(max(value, 0), (1 << mod.tsteps) - 1)

    def _pool_value(self, mod, j, o, x):
        k = mod.rows
        if mod.poolmode == 1:
            best = 0
            for ky in range(k):
                vrow = mod.vdec[j][o * k + ky]
                for kx in range(k):
                    if vrow[x * k + kx] > best:
                        best = vrow[x * k + kx]
            return min(best, (1 << mod.tsteps) - 1)
        return self._requant(mod.psum[j][o][x], mod)

    def _op_acts(self, ins):
        mod = self._active()
        if not mod.idle_at(self.cycle):
            self._fault("ACTS while module busy")
        if mod.kind == "linear":
            self._drain_1d(mod, ins)
        else:
            self._drain_2d(mod, ins)
        self._charge(2, TRANSFER)

    def _drain_2d(self, mod, ins):
        n, dout, t_steps = mod.count, mod.dout, mod.tsteps
        raw = mod.outmode == 1
        expected = n * dout * (1 if raw else t_steps)
        ptr = mod.drain_ptr
        if ptr >= expected:
            self._fault("drain past the group's output count")
        mod.drain_ptr += 1
        if raw:
            j, o = divmod(ptr, dout)
            if ins.a != MEM_OUTPUT:
                self._fault("raw drain must target the output port")
            for x in range(dout):
                if mod.kind == "pool":
                    self.output[ins.b + x] = self._pool_value(mod, j, o, x)
                else:
                    self.output[ins.b + x] = mod.psum[j][o][x]
        else:
            j, rem = divmod(ptr, dout * t_steps)
            o, t = divmod(rem, t_steps)
            if mod.kind == "pool":
                values = [self._pool_value(mod, j, o, x) for x in range(dout)]
            else:
                values = [self._requant(mod.psum[j][o][x], mod)
                          for x in range(dout)]
            row_bits = 0
            for x, v in enumerate(values):
                row_bits |= ((v >> t) & 1) << x
            mem = self._buffer(ins.a)
            if not 0 <= ins.b < mem.height:
                self._fault(f"ACTS address {ins.b} out of range")
            if ins.a in (MEM_PING1D, MEM_PONG1D):
                pos = mod.bitbase + j
                if pos >= mem.width or dout != 1:
                    self._fault("flatten store outside the 1D buffer row")
                mem.rows[ins.b] = ((mem.rows[ins.b] & ~(1 << pos))
                                   | ((row_bits & 1) << pos))
            else:
                if dout > mem.width:
                    self._fault("stored row wider than the buffer")
                mem.rows[ins.b] = row_bits
        if mod.drain_ptr == expected:
            mod.psum = None
            mod.vdec = None

    def _drain_1d(self, mod, ins):
        n, t_steps = mod.count, mod.tsteps
        raw = mod.outmode == 1
        expected = n if raw else t_steps
        ptr = mod.drain_ptr
        if ptr >= expected:
            self._fault("drain past the group's output count")
        mod.drain_ptr += 1
        if raw:
            if ins.a != MEM_OUTPUT:
                self._fault("raw drain must target the output port")
            self.output[ins.b] = mod.psum1[ptr]
        else:
            t = ptr
            mem = self._buffer(ins.a)
            if not 0 <= ins.b < mem.height:
                self._fault(f"ACTS address {ins.b} out of range")
            if mod.bitbase + n > mem.width:
                self._fault("store past the 1D buffer width")
            region = ((1 << n) - 1) << mod.bitbase
            bits = 0
            for j in range(n):
                v = self._requant(mod.psum1[j], mod)
                bits |= ((v >> t) & 1) << (mod.bitbase + j)
            mem.rows[ins.b] = (mem.rows[ins.b] & ~region) | bits
        if mod.drain_ptr == expected:
            mod.psum1 = None


# ----------------------------------------------------------------------------
# Front door
# ----------------------------------------------------------------------------

def preload_input(machine: Machine, planes):
    """Write encoded input planes into the first ping buffer."""
    t_steps = machine.plan.design.time_steps
    if len(planes.shape) == 4:
        mem = machine.mems[MEM_PING2D]
        t_n, c_n, h, w = planes.shape
        if t_n != t_steps:
            raise SimFault(f"input has {t_n} planes, plan expects {t_steps}")
        for c in range(c_n):
            for t in range(t_n):
                for r in range(h):
                    bits = 0
                    for x in range(w):
                        if planes[t, c, r, x]:
                            bits |= 1 << x
                    addr = (c * t_steps + t) * h + r
                    if addr >= mem.height:
                        raise SimFault("input exceeds the ping buffer")
                    mem.rows[addr] = bits
    else:
        mem = machine.mems[MEM_PING1D]
        t_n, feats = planes.shape
        for t in range(t_n):
            bits = 0
            for i in range(feats):
                if planes[t, i]:
                    bits |= 1 << i
            mem.rows[t] = bits


def run(program, plan: HardwarePlan, images, planes, trace=False):
    """Execute a program; returns (output integer list, SimReport, machine)."""
    machine = Machine(plan, program, images, trace=trace)
    preload_input(machine, planes)
    report = machine.run()
    if machine.output:
        size = max(machine.output) + 1
        missing = size - len(machine.output)
        if missing:
            raise SimFault(f"output has {missing} unwritten entries")
        output = [machine.output[i] for i in range(size)]
    else:
        output = []
    return output, report, machine


def images_by_mem(plan: HardwarePlan, images_by_layer):
    return {plan.weight_mems[i].mem_id: rows
            for i, rows in images_by_layer.items()}
