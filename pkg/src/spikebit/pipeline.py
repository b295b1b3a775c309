"""End-to-end compile and execution helpers shared by the CLI and tests."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import codegen, encode, isa, reference, sim
from . import model as mdl
from . import plan as planner
from .errors import ParseError
from .plan import DesignVars, HardwarePlan

PLAN_FILE = "plan.json"
PROGRAM_FILE = "program.bin"
LISTING_FILE = "program.asm"
REPORT_FILE = "quant_report.txt"
WEIGHT_DIR = "weights"


@dataclass
class CompileResult:
    net: mdl.Network
    design: DesignVars
    qweights: dict
    scales: dict
    plan: HardwarePlan
    images: dict            # layer index -> memory rows
    program: list           # after optional reordering
    program_naive: list


def compile_network(net, design: DesignVars, calib_samples,
                    reorder=True) -> CompileResult:
    """Quantize, calibrate, plan and generate code for a validated network."""
    if design.pool_mode_override:
        for spec in net.layers:
            if spec.kind == mdl.POOL:
                spec.pool_mode = design.pool_mode_override
        net = mdl.validate(net)
    cfg = design.quant()
    qweights = encode.quantize_network(net, cfg)
    act_scales = encode.calibrate_activations(net, calib_samples, cfg)
    scales = encode.derive_scales(net, qweights, act_scales, cfg)
    plan = planner.build_plan(net, design, scales)
    lin_par = plan.pm_1d.parallel_features if plan.pm_1d else design.lin_parallel
    images = planner.build_rom_images(net, qweights, design, lin_par)
    naive = codegen.generate(net, plan)
    program = codegen.reorder_for_overlap(naive) if reorder else naive
    return CompileResult(net=net, design=design, qweights=qweights,
                         scales=scales, plan=plan, images=images,
                         program=program, program_naive=naive)


def input_frac_bits(plan: HardwarePlan):
    first = min(plan.scales)
    return plan.scales[first].in_frac_bits


def encode_for_plan(plan: HardwarePlan, x):
    """Encode one float input into spike planes matching the plan's scales."""
    planes, _ = encode.encode_input(x, input_frac_bits(plan),
                                    plan.design.time_steps)
    if planes.ndim == 4 and planes.shape[2] == 1 and planes.shape[3] == 1 \
            and not any(l["kind"] in ("conv", "pool") for l in plan.layers):
        planes = planes.reshape(planes.shape[0], -1)
    return planes


def simulate(result_or_bundle, x, program=None, trace=False):
    """Encode an input and run it through the simulator."""
    r = result_or_bundle
    planes = encode_for_plan(r.plan, x)
    images = sim.images_by_mem(r.plan, r.images)
    prog = program if program is not None else r.program
    return sim.run(prog, r.plan, images, planes, trace=trace)


# ----------------------------------------------------------------------------
# Bundle files
# ----------------------------------------------------------------------------

def write_bundle(result: CompileResult, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / PLAN_FILE).write_text(planner.plan_dumps(result.plan))
    isa.write_program(out / PROGRAM_FILE, result.program)
    (out / LISTING_FILE).write_text(
        isa.disassemble(result.program, annotate=True))
    cfg = result.design.quant()
    (out / REPORT_FILE).write_text(
        encode.quant_report(result.net, result.qweights, result.scales, cfg))
    wdir = out / WEIGHT_DIR
    wdir.mkdir(exist_ok=True)
    for i, rows in sorted(result.images.items()):
        planner.write_mem_image(wdir / f"layer{i:02d}.mem", rows,
                                result.plan.weight_mems[i].width)


@dataclass
class Bundle:
    plan: HardwarePlan
    program: list
    images: dict            # layer index -> rows


def load_bundle(bundle_dir) -> Bundle:
    bundle_dir = Path(bundle_dir)
    plan_path = bundle_dir / PLAN_FILE
    if not plan_path.is_file():
        raise ParseError(f"{plan_path} not found")
    plan = planner.plan_loads(plan_path.read_text())
    program = isa.read_program(bundle_dir / PROGRAM_FILE)
    images = {}
    for i in plan.weight_mems:
        images[i] = planner.read_mem_image(
            bundle_dir / WEIGHT_DIR / f"layer{i:02d}.mem")
    return Bundle(plan=plan, program=program, images=images)


def run_bundle(bundle: Bundle, x, trace=False):
    planes = encode_for_plan(bundle.plan, x)
    images = sim.images_by_mem(bundle.plan, bundle.images)
    return sim.run(bundle.program, bundle.plan, images, planes, trace=trace)


# ----------------------------------------------------------------------------
# Reference path reconstructed from bundle artifacts (used by verify)
# ----------------------------------------------------------------------------

def network_from_plan(plan: HardwarePlan) -> mdl.Network:
    """Rebuild the architecture skeleton recorded in a plan (no parameters)."""
    layers = []
    seen_linear = False
    for entry in plan.layers:
        kind = entry["kind"]
        if kind == "linear" and not seen_linear:
            layers.append(mdl.LayerSpec(mdl.FLATTEN))
            seen_linear = True
        if kind == "conv":
            layers.append(mdl.LayerSpec(mdl.CONV, kernel=entry["kernel"],
                                        stride=entry["stride"],
                                        padding=entry["padding"],
                                        out_channels=entry["out_channels"]))
        elif kind == "pool":
            layers.append(mdl.LayerSpec(mdl.POOL, kernel=entry["kernel"],
                                        stride=entry["stride"],
                                        pool_mode=entry["pool_mode"]))
        else:
            layers.append(mdl.LayerSpec(mdl.LINEAR,
                                        features_out=entry["features_out"]))
    net = mdl.Network(plan.net_name, tuple(plan.input_shape), layers)
    return mdl.infer_shapes(net)


def qweights_from_images(plan: HardwarePlan, images) -> dict:
    """Invert the ROM packing back into quantized weight tensors."""
    bits = plan.design.bits
    net = network_from_plan(plan)
    compute = net.compute_layers()
    entry_by_idx = {e["index"]: e for e in plan.layers}
    # plan.layers indices refer to the original network; remap onto the
    # rebuilt skeleton, which inserts the flatten at the same boundary.
    rebuilt = {}
    for pos, i in enumerate(sorted(entry_by_idx)):
        rebuilt[i] = compute[pos]
    out = {}
    for i, rows in images.items():
        e = entry_by_idx[i]
        frac = plan.scales[i].wgt_frac_bits
        if e["kind"] == "conv":
            k, c_in, c_out = e["kernel"], e["in_channels"], e["out_channels"]
            w = np.zeros((c_out, c_in, k, k), dtype=np.int64)
            for oc in range(c_out):
                for c in range(c_in):
                    word = rows[oc * c_in + c]
                    for ky in range(k):
                        for kx in range(k):
                            w[oc, c, ky, kx] = planner.decode_rom_field(
                                word, ky * k + kx, bits)
        else:
            f_in, f_out = e["features_in"], e["features_out"]
            par = plan.pm_1d.parallel_features
            w = np.zeros((f_out, f_in), dtype=np.int64)
            for f in range(f_out):
                g, s = divmod(f, par)
                for i_in in range(f_in):
                    w[f, i_in] = planner.decode_rom_field(
                        rows[g * f_in + i_in], s, bits)
        out[rebuilt[i]] = encode.QuantizedTensor(data=w, frac_bits=frac,
                                                 bits=bits)
    return out


def reference_logits(bundle: Bundle, x):
    """Oracle forward pass built entirely from the bundle artifacts."""
    plan = bundle.plan
    net = network_from_plan(plan)
    compute = net.compute_layers()
    orig = sorted(int(k) for k in plan.scales)
    scales = {compute[pos]: plan.scales[i] for pos, i in enumerate(orig)}
    qweights = qweights_from_images(plan, bundle.images)
    planes = encode_for_plan(plan, x)
    if planes.ndim == 2:
        planes = planes.reshape(planes.shape[0], -1, 1, 1)
    cfg = plan.design.quant()
    _, out = reference.quantized_forward(net, qweights, scales, planes, cfg,
                                         headroom=plan.design.psum_headroom)
    return np.asarray(out).reshape(-1)
