"""Command-line driver: compile, run, verify, disasm, report.

Exit codes are stable per error class:

    0  success                     5  planning / capacity
    1  I/O error                   6  code generation / ISA
    2  usage (argparse)            7  simulator fault
    3  model format / shapes       8  verification mismatch
    4  encoding / calibration
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import isa, pipeline
from . import model as mdl
from .errors import (CapacityError, CodegenError, EmptyCalibrationSet,
                     FieldOverflow, IllegalOpcode, MissingParams,
                     NegativeInput, ParseError, PlanError, PsumOverflow,
                     RequantShiftError, ShapeError, SimFault)
from .plan import DesignVars

_EXIT_BY_ERROR = [
    ((ParseError, ShapeError, MissingParams), 3),
    ((EmptyCalibrationSet, NegativeInput, RequantShiftError), 4),
    ((CapacityError, PlanError), 5),
    ((CodegenError, FieldOverflow, IllegalOpcode), 6),
    ((PsumOverflow, SimFault), 7),
]


def _exit_code(exc):
    for classes, code in _EXIT_BY_ERROR:
        if isinstance(exc, classes):
            return code
    return 1


def load_design(path) -> DesignVars:
    if path is None:
        return DesignVars()
    try:
        return DesignVars.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e}") from e


def read_input(path, input_shape):
    return mdl.read_blob(path, tuple(input_shape))


def _calibration_samples(calib_dir, input_shape):
    files = sorted(Path(calib_dir).glob("*.f32"))
    if not files:
        raise EmptyCalibrationSet(f"no .f32 samples in {calib_dir}")
    return [read_input(f, input_shape) for f in files]


def cmd_compile(args):
    net = mdl.load_model(args.model)
    design = load_design(args.design)
    samples = _calibration_samples(args.calibration, net.input_shape)
    result = pipeline.compile_network(net, design, samples,
                                      reorder=not args.no_reorder)

    out = Path(args.out)
    tmp = out.with_name(out.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    pipeline.write_bundle(result, tmp)
    if out.exists():
        shutil.rmtree(out)
    tmp.rename(out)
    print(f"bundle written to {out} "
          f"({len(result.program)} instructions, "
          f"{result.plan.onchip_bits()} on-chip bits)")
    return 0


def _input_paths(spec):
    p = Path(spec)
    if p.is_dir():
        files = sorted(p.glob("*.f32"))
        if not files:
            raise ParseError(f"no .f32 inputs in {p}")
        return files
    return [p]


def cmd_run(args):
    bundle = pipeline.load_bundle(args.bundle)
    x = read_input(args.input, bundle.plan.input_shape)
    trace = args.trace is not None
    output, report, machine = pipeline.run_bundle(bundle, x, trace=trace)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "logits.txt").write_text("".join(f"{v}\n" for v in output))
    (out / "sim_report.txt").write_text(report.to_text())
    if trace:
        with open(args.trace, "w") as f:
            for cycle, pc, text in machine.trace:
                f.write(f"{cycle:10d} {pc:8d}  {text}\n")
    print(f"{len(output)} outputs, {report.total_cycles} cycles "
          f"({report.latency_us:.1f} us at {report.clock_mhz:g} MHz)")
    return 0


def _verify_one(bundle_dir, path):
    bundle = pipeline.load_bundle(bundle_dir)
    x = read_input(path, bundle.plan.input_shape)
    got, _, _ = pipeline.run_bundle(bundle, x)
    want = pipeline.reference_logits(bundle, x)
    diffs = int(np.count_nonzero(np.asarray(got) != want))
    return str(path), diffs


def cmd_verify(args):
    paths = _input_paths(args.input)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_verify_one, [args.bundle] * len(paths),
                                    paths))
    else:
        bundle = pipeline.load_bundle(args.bundle)
        results = []
        for path in paths:
            x = read_input(path, bundle.plan.input_shape)
            got, _, _ = pipeline.run_bundle(bundle, x)
            want = pipeline.reference_logits(bundle, x)
            diffs = int(np.count_nonzero(np.asarray(got) != want))
            results.append((str(path), diffs))
    failed = 0
    for path, diffs in results:
        status = "ok" if diffs == 0 else f"MISMATCH ({diffs} values)"
        print(f"{path}: {status}")
        failed += bool(diffs)
    print(f"{len(results) - failed}/{len(results)} bit-exact")
    return 0 if failed == 0 else 8


def cmd_disasm(args):
    program = isa.read_program(args.program)
    sys.stdout.write(isa.disassemble(program))
    return 0


def cmd_report(args):
    bundle = pipeline.load_bundle(args.bundle)
    plan = bundle.plan
    print(f"network {plan.net_name}  input {plan.input_shape}")
    print(f"design: B={plan.design.bits} T={plan.design.time_steps} "
          f"replicas={plan.design.conv_replicas} "
          f"clock={plan.design.clock_mhz:g} MHz")
    print(f"storage: {plan.storage_mode}, on-chip {plan.onchip_bits()} bits "
          f"of {plan.design.onchip_capacity_bits}")
    print()
    print(f"{'layer':>5} {'kind':<7} {'size':>4} {'para':>4} {'util%':>6}  "
          f"{'windows (start..end)':<24} {'mem WxH':>12}")
    for entry in plan.layers:
        i = entry["index"]
        pm = plan.module_for_layer(i)
        mem = plan.weight_mems.get(i)
        memtxt = f"{mem.width}x{mem.height}" if mem else "-"
        if pm is not None:
            a = pm.assigns[i]
            util = 100.0 * a.parallel * entry["out_dim"] / pm.width
            wins = " ".join(f"{s}..{e}" for s, e in zip(a.start, a.end))
            print(f"{i:>5} {entry['kind']:<7} {entry['out_dim']:>4} "
                  f"{a.parallel:>4} {util:>6.1f}  {wins:<24} {memtxt:>12}")
        else:
            print(f"{i:>5} {entry['kind']:<7} {'-':>4} {'-':>4} {'-':>6}  "
                  f"{'-':<24} {memtxt:>12}")
    print()
    buf = plan.buffers
    print(f"buffers: ping2d {buf.ping2d} pong2d {buf.pong2d} "
          f"ping1d {buf.ping1d} pong1d {buf.pong1d}")

    zero = np.zeros(plan.input_shape, dtype=np.float64)
    _, rep, _ = pipeline.run_bundle(bundle, zero)
    print(f"predicted cycles: {rep.total_cycles} "
          f"({rep.latency_us:.1f} us at {rep.clock_mhz:g} MHz, "
          f"ipc {rep.instructions_per_clock:.3f})")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="spikebit", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="compile a model bundle")
    c.add_argument("model", help="model bundle directory")
    c.add_argument("--design", help="design variables JSON file")
    c.add_argument("--calibration", required=True,
                   help="directory of .f32 calibration samples")
    c.add_argument("-o", "--out", required=True, help="output bundle directory")
    c.add_argument("--no-reorder", action="store_true",
                   help="skip the overlap reordering pass")
    c.set_defaults(func=cmd_compile)

    r = sub.add_parser("run", help="simulate a compiled bundle on an input")
    r.add_argument("bundle")
    r.add_argument("input", help=".f32 input tensor")
    r.add_argument("-o", "--out", default=".", help="output directory")
    r.add_argument("--trace", help="write a per-instruction trace log")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="check simulator output against the reference")
    v.add_argument("bundle")
    v.add_argument("input", help=".f32 file or directory of inputs")
    v.add_argument("--jobs", type=int, default=1)
    v.set_defaults(func=cmd_verify)

    d = sub.add_parser("disasm", help="disassemble a program binary")
    d.add_argument("program")
    d.set_defaults(func=cmd_disasm)

    rep = sub.add_parser("report", help="summarize a compiled bundle")
    rep.add_argument("bundle")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        import os
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # mapped, stable exit codes
        code = _exit_code(e)
        if code == 1 and not isinstance(e, OSError):
            raise
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
