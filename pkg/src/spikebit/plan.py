"""Virtual hardware planning.

Derives the accelerator instance for a network: one 2D processing module per
distinct (kind, kernel) pair sized by its first assigned layer, intra-module
parallel output-channel windows packed along the module width, optional
replicated conv modules, per-layer weight memories (on-chip ROM or a staged
external path), and the alternating ping-pong activation buffers.

Window packing: windows sit at start columns S_p = floor(p*(D_in+pad)/stride)
(adjacent input copies share one padding run, hence the single pad term) and
a window is kept only while its output columns fit the module width, its
input copy fits the activation row register sized by the first assigned
layer, and it stays disjoint from the previous window.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from . import model as mdl
from .encode import LayerScales, QuantConfig
from .errors import CapacityError, PlanError

PLAN_VERSION = 1

# Decoder-visible memory map.
MEM_PING2D = 0
MEM_PONG2D = 1
MEM_PING1D = 2
MEM_PONG1D = 3
MEM_STAGING = 4
MEM_WEIGHT_BASE = 5
MEM_OUTPUT = 15

STORAGE_ROM = "rom"
STORAGE_STAGED = "staged"


@dataclass
class DesignVars:
    """User-facing hardware knobs (defaults mirror the reference setup)."""

    bits: int = 3
    time_steps: int = 4
    clamp_sigma: float = 3.0
    conv_replicas: int = 1
    onchip_capacity_bits: int = 10_000_000
    clock_mhz: float = 200.0
    psum_headroom: int = 2
    dram_penalty: int = 20          # extra cycles per kernel row from external memory
    lin_parallel: int = 8           # parallel output features of the 1D module
    intra_parallel: bool = True
    pm_width: dict = field(default_factory=dict)   # "kind:K" -> X override
    pool_mode_override: str | None = None

    def quant(self) -> QuantConfig:
        return QuantConfig(self.bits, self.time_steps, self.clamp_sigma)

    def to_dict(self):
        return {
            "bits": self.bits, "time_steps": self.time_steps,
            "clamp_sigma": self.clamp_sigma, "conv_replicas": self.conv_replicas,
            "onchip_capacity_bits": self.onchip_capacity_bits,
            "clock_mhz": self.clock_mhz, "psum_headroom": self.psum_headroom,
            "dram_penalty": self.dram_penalty, "lin_parallel": self.lin_parallel,
            "intra_parallel": self.intra_parallel, "pm_width": dict(self.pm_width),
            "pool_mode_override": self.pool_mode_override,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


@dataclass
class PMAssign:
    """One layer mapped onto a 2D processing module."""

    layer: int
    parallel: int               # P: windows computed side by side
    start: list[int]            # S_p
    end: list[int]              # E_p


@dataclass
class PMConfig2D:
    module_id: int
    kind: str                   # conv | pool
    rows: int                   # Y, equals the kernel size
    width: int                  # X, output columns
    act_width: int              # activation row register, input columns
    replicas: int
    strides: list[int] = field(default_factory=list)
    assigns: dict[int, PMAssign] = field(default_factory=dict)


@dataclass
class PMConfig1D:
    module_id: int
    parallel_features: int


@dataclass
class WeightMemConfig:
    layer: int
    mem_id: int
    width: int
    height: int
    storage: str

    def bits(self):
        return self.width * self.height


@dataclass
class BufferConfig:
    ping2d: tuple[int, int] = (0, 0)    # (W, H)
    pong2d: tuple[int, int] = (0, 0)
    ping1d: tuple[int, int] = (0, 0)
    pong1d: tuple[int, int] = (0, 0)

    def bits(self):
        return sum(w * h for w, h in
                   (self.ping2d, self.pong2d, self.ping1d, self.pong1d))


@dataclass
class HardwarePlan:
    design: DesignVars
    pms_2d: list[PMConfig2D]
    pm_1d: PMConfig1D | None
    weight_mems: dict[int, WeightMemConfig]
    staging: tuple[int, int] | None
    storage_mode: str
    buffers: BufferConfig
    psum_bits: dict[int, int]
    layers: list[dict]                      # compute-layer geometry table
    scales: dict[int, LayerScales]
    net_name: str = ""
    input_shape: tuple = ()

    def module_for_layer(self, layer_idx):
        for pm in self.pms_2d:
            if layer_idx in pm.assigns:
                return pm
        return None

    def onchip_bits(self):
        total = self.buffers.bits()
        if self.storage_mode == STORAGE_ROM:
            total += sum(m.bits() for m in self.weight_mems.values())
        else:
            total += self.staging[0] * self.staging[1]
        return total


# ----------------------------------------------------------------------------
# Processing modules
# ----------------------------------------------------------------------------

def _pack_windows(x, act_width, d_in, d_out, stride, pad, cap):
    """Start/end columns of the parallel windows that fit the module."""
    starts, ends = [0], [d_out - 1]
    spacing = d_in + pad
    p = 1
    while p < cap:
        s = (p * spacing) // stride
        e = s + d_out - 1
        if e > x - 1:
            break
        if s * stride + d_in + 2 * pad > act_width:
            break
        if s <= ends[-1]:
            break
        starts.append(s)
        ends.append(e)
        p += 1
    return starts, ends


def plan_pms(net, design: DesignVars):
    """Instantiate 2D processing modules and map every layer onto one."""
    if not 1 <= design.conv_replicas <= 16:
        raise PlanError(f"conv_replicas {design.conv_replicas} outside [1, 16]")
    pms: dict[tuple, PMConfig2D] = {}
    order = []
    next_id = 0
    pm_1d = None

    for i in net.compute_layers():
        spec = net.layers[i]
        if spec.kind == mdl.LINEAR:
            if pm_1d is None:
                par = min(design.lin_parallel,
                          max(l.features_out for l in net.layers
                              if l.kind == mdl.LINEAR))
                pm_1d = PMConfig1D(module_id=-1, parallel_features=max(1, par))
            continue

        key = (spec.kind, spec.kernel)
        pm = pms.get(key)
        if pm is None:
            width = design.pm_width.get(f"{spec.kind}:{spec.kernel}", spec.out_dim)
            pm = PMConfig2D(
                module_id=next_id, kind=spec.kind, rows=spec.kernel, width=width,
                act_width=spec.in_dim + 2 * spec.padding,
                replicas=design.conv_replicas if spec.kind == mdl.CONV else 1)
            pms[key] = pm
            order.append(pm)
            next_id += 1

        if spec.out_dim > pm.width:
            raise PlanError(
                f"layer {i}: output width {spec.out_dim} exceeds module width "
                f"{pm.width} fixed by the first {spec.kind}:{spec.kernel} layer")
        if spec.in_dim + 2 * spec.padding > pm.act_width:
            raise PlanError(
                f"layer {i}: input row {spec.in_dim + 2 * spec.padding} exceeds "
                f"activation register width {pm.act_width}")

        cap = pm.width // spec.out_dim if design.intra_parallel else 1
        starts, ends = _pack_windows(pm.width, pm.act_width, spec.in_dim,
                                     spec.out_dim, spec.stride, spec.padding, cap)
        pm.assigns[i] = PMAssign(layer=i, parallel=len(starts),
                                 start=starts, end=ends)
        if spec.stride not in pm.strides:
            pm.strides.append(spec.stride)

    if pm_1d is not None:
        pm_1d.module_id = next_id
    return order, pm_1d


def utilization(pm: PMConfig2D, assign: PMAssign, net) -> float:
    """Occupied output columns as a percentage of the module width."""
    d_out = net.layers[assign.layer].out_dim
    return 100.0 * assign.parallel * d_out / pm.width


# ----------------------------------------------------------------------------
# Memories
# ----------------------------------------------------------------------------

def weight_mem_shape(spec, bits, lin_parallel):
    """Memory geometry: one K*K kernel per row for conv; one parallel
    feature group per row for linear."""
    if spec.kind == mdl.CONV:
        return spec.kernel * spec.kernel * bits, spec.out_channels * spec.in_channels
    groups = -(-spec.features_out // lin_parallel)
    return lin_parallel * bits, groups * spec.features_in


def plan_weight_memory(net, design: DesignVars, lin_parallel, buffer_bits):
    """Choose on-chip ROM per layer or a single staged RAM, capacity permitting."""
    shapes = {}
    for i in net.compute_layers():
        spec = net.layers[i]
        if spec.kind in (mdl.CONV, mdl.LINEAR):
            shapes[i] = weight_mem_shape(spec, design.bits, lin_parallel)

    if len(shapes) > MEM_OUTPUT - MEM_WEIGHT_BASE:
        raise PlanError(f"more than {MEM_OUTPUT - MEM_WEIGHT_BASE} parameter "
                        f"layers exhaust the memory id space")

    total_rom = sum(w * h for w, h in shapes.values())
    capacity = design.onchip_capacity_bits

    if total_rom + buffer_bits <= capacity:
        storage, staging = STORAGE_ROM, None
    else:
        staging = (max(w for w, _ in shapes.values()),
                   max(h for _, h in shapes.values()))
        if staging[0] * staging[1] + buffer_bits > capacity:
            raise CapacityError(
                f"staging RAM of {staging[0] * staging[1]} bits plus buffers "
                f"exceeds capacity {capacity}")
        storage = STORAGE_STAGED

    mems = {}
    for slot, (i, (w, h)) in enumerate(sorted(shapes.items())):
        mems[i] = WeightMemConfig(layer=i, mem_id=MEM_WEIGHT_BASE + slot,
                                  width=w, height=h, storage=storage)
    return mems, staging, storage


def plan_buffers(net, time_steps) -> BufferConfig:
    """Alternating max-tracking over the layer sequence (2D and 1D pairs)."""
    buf = BufferConfig()
    w2 = [0, 0]
    h2 = [0, 0]
    pp = 0
    for i in net.compute_layers():
        spec = net.layers[i]
        if spec.kind not in (mdl.CONV, mdl.POOL):
            continue
        w2[pp] = max(w2[pp], spec.in_dim)
        h2[pp] = max(h2[pp], spec.in_dim * spec.in_channels * time_steps)
        pp ^= 1
    buf.ping2d, buf.pong2d = (w2[0], h2[0]), (w2[1], h2[1])

    w1 = [0, 0]
    pp = 0
    for i in net.compute_layers():
        spec = net.layers[i]
        if spec.kind != mdl.LINEAR:
            continue
        w1[pp] = max(w1[pp], spec.features_in)
        pp ^= 1
    buf.ping1d = (w1[0], time_steps if w1[0] else 0)
    buf.pong1d = (w1[1], time_steps if w1[1] else 0)
    return buf


def psum_width(fan_in, design: DesignVars):
    return (design.bits + design.time_steps + math.ceil(math.log2(fan_in))
            + design.psum_headroom)


# ----------------------------------------------------------------------------
# Full plan assembly
# ----------------------------------------------------------------------------

def build_plan(net, design: DesignVars, scales) -> HardwarePlan:
    """Assemble the complete hardware plan for a validated network."""
    if net.has_bias():
        raise PlanError("bias extension is not supported by the hardware path")

    pms, pm_1d = plan_pms(net, design)
    buffers = plan_buffers(net, design.time_steps)
    lin_par = pm_1d.parallel_features if pm_1d else design.lin_parallel
    mems, staging, storage = plan_weight_memory(net, design, lin_par,
                                                buffers.bits())

    psum_bits = {}
    layers = []
    compute = net.compute_layers()
    for i in compute:
        spec = net.layers[i]
        if spec.kind == mdl.CONV:
            fan = spec.in_channels * spec.kernel * spec.kernel
        elif spec.kind == mdl.LINEAR:
            fan = spec.features_in
        else:
            fan = spec.kernel * spec.kernel
        width = psum_width(fan, design)
        if width > 62:
            raise PlanError(f"layer {i}: accumulator width {width} > 62 bits")
        psum_bits[i] = width
        layers.append({
            "index": i, "kind": spec.kind, "kernel": spec.kernel,
            "stride": spec.stride, "padding": spec.padding,
            "in_channels": spec.in_channels, "out_channels": spec.out_channels,
            "in_dim": spec.in_dim, "out_dim": spec.out_dim,
            "features_in": spec.features_in, "features_out": spec.features_out,
            "pool_mode": spec.pool_mode if spec.kind == mdl.POOL else None,
        })

    plan = HardwarePlan(
        design=design, pms_2d=pms, pm_1d=pm_1d, weight_mems=mems,
        staging=staging, storage_mode=storage, buffers=buffers,
        psum_bits=psum_bits, layers=layers, scales=dict(scales),
        net_name=net.name, input_shape=tuple(net.input_shape))

    if plan.onchip_bits() > design.onchip_capacity_bits:
        raise CapacityError(f"on-chip total {plan.onchip_bits()} bits exceeds "
                            f"capacity {design.onchip_capacity_bits}")
    return plan


# ----------------------------------------------------------------------------
# Weight memory images
# ----------------------------------------------------------------------------

def build_rom_images(net, qweights, design: DesignVars, lin_parallel):
    """Pack quantized weights into memory rows (LSB-first B-bit fields)."""
    bits = design.bits
    mask = (1 << bits) - 1
    images = {}
    for i in net.compute_layers():
        spec = net.layers[i]
        if spec.kind == mdl.CONV:
            w = qweights[i].data
            rows = []
            for oc in range(spec.out_channels):
                for c in range(spec.in_channels):
                    word = 0
                    for idx, v in enumerate(w[oc, c].reshape(-1)):
                        word |= (int(v) & mask) << (idx * bits)
                    rows.append(word)
            images[i] = rows
        elif spec.kind == mdl.LINEAR:
            w = qweights[i].data
            rows = []
            groups = -(-spec.features_out // lin_parallel)
            for g in range(groups):
                for f_in in range(spec.features_in):
                    word = 0
                    for s in range(min(lin_parallel, spec.features_out - g * lin_parallel)):
                        word |= (int(w[g * lin_parallel + s, f_in]) & mask) << (s * bits)
                    rows.append(word)
            images[i] = rows
    return images


def decode_rom_field(word, slot, bits):
    """Extract the slot-th B-bit two's-complement field of a memory row."""
    v = (word >> (slot * bits)) & ((1 << bits) - 1)
    if v >= 1 << (bits - 1):
        v -= 1 << bits
    return v


def write_mem_image(path, rows, width_bits):
    digits = max(1, -(-width_bits // 4))
    with open(path, "w") as f:
        for row in rows:
            f.write(f"{row:0{digits}x}\n")


def read_mem_image(path):
    with open(path) as f:
        return [int(line, 16) for line in f if line.strip()]


# ----------------------------------------------------------------------------
# Serialization (versioned, deterministic)
# ----------------------------------------------------------------------------

def plan_to_dict(plan: HardwarePlan) -> dict:
    return {
        "version": PLAN_VERSION,
        "network": {"name": plan.net_name, "input_shape": list(plan.input_shape)},
        "design": plan.design.to_dict(),
        "modules": [
            {"id": pm.module_id, "kind": pm.kind, "rows": pm.rows,
             "width": pm.width, "act_width": pm.act_width,
             "replicas": pm.replicas, "strides": sorted(pm.strides)}
            for pm in plan.pms_2d
        ],
        "module_1d": ({"id": plan.pm_1d.module_id,
                       "parallel_features": plan.pm_1d.parallel_features}
                      if plan.pm_1d else None),
        "assignments": {
            str(a.layer): {"module": pm.module_id, "parallel": a.parallel,
                           "start": a.start, "end": a.end}
            for pm in plan.pms_2d for a in pm.assigns.values()
        },
        "weight_mems": {
            str(m.layer): {"mem_id": m.mem_id, "width": m.width,
                           "height": m.height, "storage": m.storage}
            for m in plan.weight_mems.values()
        },
        "staging": list(plan.staging) if plan.staging else None,
        "storage_mode": plan.storage_mode,
        "buffers": {"ping2d": list(plan.buffers.ping2d),
                    "pong2d": list(plan.buffers.pong2d),
                    "ping1d": list(plan.buffers.ping1d),
                    "pong1d": list(plan.buffers.pong1d)},
        "psum_bits": {str(k): v for k, v in plan.psum_bits.items()},
        "layers": plan.layers,
        "scales": {
            str(i): {"kind": s.kind, "v_hat": s.v_hat,
                     "act_frac": s.act_frac_bits, "in_frac": s.in_frac_bits,
                     "wgt_frac": s.wgt_frac_bits, "shift": s.shift,
                     "avg_shift": s.avg_shift}
            for i, s in plan.scales.items()
        },
    }


def plan_dumps(plan: HardwarePlan) -> str:
    return json.dumps(plan_to_dict(plan), indent=1, sort_keys=True)


def plan_from_dict(d: dict) -> HardwarePlan:
    if d.get("version") != PLAN_VERSION:
        raise PlanError(f"unsupported plan version {d.get('version')}")
    design = DesignVars.from_dict(d["design"])
    pms = []
    for m in d["modules"]:
        pms.append(PMConfig2D(module_id=m["id"], kind=m["kind"], rows=m["rows"],
                              width=m["width"], act_width=m["act_width"],
                              replicas=m["replicas"], strides=list(m["strides"])))
    by_id = {pm.module_id: pm for pm in pms}
    for key, a in d["assignments"].items():
        i = int(key)
        by_id[a["module"]].assigns[i] = PMAssign(
            layer=i, parallel=a["parallel"], start=list(a["start"]),
            end=list(a["end"]))
    pm_1d = None
    if d.get("module_1d"):
        pm_1d = PMConfig1D(module_id=d["module_1d"]["id"],
                           parallel_features=d["module_1d"]["parallel_features"])
    mems = {}
    for key, m in d["weight_mems"].items():
        i = int(key)
        mems[i] = WeightMemConfig(layer=i, mem_id=m["mem_id"], width=m["width"],
                                  height=m["height"], storage=m["storage"])
    buf = BufferConfig(ping2d=tuple(d["buffers"]["ping2d"]),
                       pong2d=tuple(d["buffers"]["pong2d"]),
                       ping1d=tuple(d["buffers"]["ping1d"]),
                       pong1d=tuple(d["buffers"]["pong1d"]))
    scales = {}
    for key, s in d["scales"].items():
        scales[int(key)] = LayerScales(
            kind=s["kind"], v_hat=s["v_hat"], act_frac_bits=s["act_frac"],
            in_frac_bits=s["in_frac"], wgt_frac_bits=s["wgt_frac"],
            shift=s["shift"], avg_shift=s["avg_shift"])
    return HardwarePlan(
        design=design, pms_2d=pms, pm_1d=pm_1d, weight_mems=mems,
        staging=tuple(d["staging"]) if d.get("staging") else None,
        storage_mode=d["storage_mode"], buffers=buf,
        psum_bits={int(k): v for k, v in d["psum_bits"].items()},
        layers=d["layers"], scales=scales,
        net_name=d["network"]["name"],
        input_shape=tuple(d["network"]["input_shape"]))


def plan_loads(text: str) -> HardwarePlan:
    return plan_from_dict(json.loads(text))
