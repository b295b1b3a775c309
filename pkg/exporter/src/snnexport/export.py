"""PyTorch model converter.

Walks a model's leaf modules in declaration order and writes the spikebit
model bundle: a JSON manifest plus one little-endian float32 blob per
parameter tensor. Supported leaves are Conv2d (square kernels, unit groups
and dilation), AvgPool2d/MaxPool2d with stride equal to the kernel, Linear,
Flatten and ReLU. ReLU is recorded as a fused activation attribute on the
preceding layer entry, never as a layer of its own; the flatten boundary is
written as a layer entry so the loader can see it. Every non-final
conv/linear layer must be ReLU-activated and the head must not be, matching
the fixed activation semantics of the consumer.

After writing, the bundle is reloaded through the spikebit API and checked on
a random input against the source model's own forward pass (1e-5 max abs
diff); exporting never succeeds silently with mismatched semantics.

Usage:
    snnexport checkpoint.pt out_dir --input-shape 1,32,32
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

import spikebit
from spikebit import reference
from spikebit.model import write_blob

MANIFEST_NAME = "model.json"
FORMAT_NAME = "spikebit-model"
FORMAT_VERSION = 1
CHECK_TOLERANCE = 1e-5


class UnsupportedLayer(Exception):
    """Model contains a module outside the supported whitelist."""


class SelfCheckError(Exception):
    """Reloaded bundle disagrees with the source model's forward pass."""


SUPPORTED = (nn.Conv2d, nn.AvgPool2d, nn.MaxPool2d, nn.Linear, nn.Flatten,
             nn.ReLU)


@dataclass
class ExportSummary:
    path: Path
    layer_count: int
    param_count: int

    def __str__(self):
        return (f"exported {self.layer_count} layers, "
                f"{self.param_count} parameters to {self.path}")


def _leaf_modules(model):
    children = list(model.children())
    if not children:
        yield model
        return
    for child in children:
        yield from _leaf_modules(child)


def _square(value, what, name):
    if isinstance(value, (tuple, list)):
        if len(set(value)) != 1:
            raise UnsupportedLayer(f"{name}: non-square {what} {value}")
        return int(value[0])
    return int(value)


def _conv_entry(mod):
    name = mod.__class__.__name__
    if mod.groups != 1:
        raise UnsupportedLayer(f"{name}: grouped convolution")
    if _square(mod.dilation, "dilation", name) != 1:
        raise UnsupportedLayer(f"{name}: dilated convolution")
    entry = {
        "kind": "conv",
        "out_channels": int(mod.out_channels),
        "kernel": _square(mod.kernel_size, "kernel", name),
        "stride": _square(mod.stride, "stride", name),
        "padding": _square(mod.padding, "padding", name),
    }
    return entry


def _pool_entry(mod):
    name = mod.__class__.__name__
    kernel = _square(mod.kernel_size, "kernel", name)
    stride = _square(mod.stride if mod.stride is not None else mod.kernel_size,
                     "stride", name)
    if kernel != stride:
        raise UnsupportedLayer(f"{name}: pooling needs stride == kernel")
    if getattr(mod, "padding", 0) not in (0, (0, 0)):
        raise UnsupportedLayer(f"{name}: padded pooling")
    mode = "max" if isinstance(mod, nn.MaxPool2d) else "avg"
    return {"kind": "pool", "kernel": kernel, "stride": stride, "mode": mode}


def _collect(model):
    """Manifest entries and parameter tensors in declaration order."""
    entries = []
    tensors = {}
    last_weighted = None
    for mod in _leaf_modules(model):
        if not isinstance(mod, SUPPORTED):
            raise UnsupportedLayer(
                f"{mod.__class__.__name__} is not a supported layer kind")
        if isinstance(mod, nn.ReLU):
            if last_weighted is None:
                raise UnsupportedLayer("ReLU without a preceding conv/linear")
            if entries[last_weighted].get("activation"):
                raise UnsupportedLayer("stacked activations")
            entries[last_weighted]["activation"] = "relu"
            continue
        if isinstance(mod, nn.Conv2d):
            entry = _conv_entry(mod)
        elif isinstance(mod, (nn.AvgPool2d, nn.MaxPool2d)):
            entry = _pool_entry(mod)
        elif isinstance(mod, nn.Flatten):
            entry = {"kind": "flatten"}
        else:
            entry = {"kind": "linear", "features_out": int(mod.out_features)}
        idx = len(entries)
        entries.append(entry)
        if isinstance(mod, (nn.Conv2d, nn.Linear)):
            last_weighted = idx
            weight = mod.weight.detach().cpu().numpy().astype("<f4")
            bias = None
            if mod.bias is not None:
                bias = mod.bias.detach().cpu().numpy().astype("<f4")
            tensors[idx] = (weight, bias)

    if not entries:
        raise UnsupportedLayer("model has no layers")
    _check_activation_pattern(entries, tensors)
    return entries, tensors


def _check_activation_pattern(entries, tensors):
    """Hidden conv/linear layers carry ReLU, the head does not."""
    weighted = [i for i, e in enumerate(entries) if i in tensors]
    for i in weighted[:-1]:
        if entries[i].get("activation") != "relu":
            raise UnsupportedLayer(
                f"layer {i} ({entries[i]['kind']}) lacks the fused ReLU the "
                f"consumer assumes for hidden layers")
    head = weighted[-1]
    if entries[head].get("activation"):
        raise UnsupportedLayer("output layer must not carry an activation")


def _self_check(model, out_dir, input_shape, rng):
    net = spikebit.load_model(out_dir)
    x = rng.random(tuple(input_shape)).astype(np.float32)
    _, got = reference.float_forward(net, x.astype(np.float64))
    with torch.no_grad():
        want = model(torch.from_numpy(x).unsqueeze(0)).squeeze(0).numpy()
    diff = float(np.max(np.abs(np.asarray(got, dtype=np.float64).reshape(-1)
                               - want.astype(np.float64).reshape(-1))))
    if diff > CHECK_TOLERANCE:
        raise SelfCheckError(f"reloaded bundle differs from the source model "
                             f"by {diff:g} (tolerance {CHECK_TOLERANCE:g})")
    return diff


def export(model_or_path, out_dir, input_shape, name=None,
           seed=0) -> ExportSummary:
    """Write a model bundle for a torch module or a saved checkpoint."""
    if isinstance(model_or_path, (str, Path)):
        model = torch.load(model_or_path, weights_only=False,
                           map_location="cpu")
        if name is None:
            name = Path(model_or_path).stem
    else:
        model = model_or_path
    if not isinstance(model, nn.Module):
        raise UnsupportedLayer(f"expected an nn.Module, got {type(model)!r}")
    model = model.eval()

    input_shape = tuple(int(v) for v in input_shape)
    if len(input_shape) != 3:
        raise ValueError("input_shape must be (channels, height, width)")

    entries, tensors = _collect(model)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = {}
    count = 0
    for idx, (weight, bias) in sorted(tensors.items()):
        wname = f"layer{idx:02d}.weight.f32"
        write_blob(out / wname, weight)
        entry = {"weight": wname, "shape": list(weight.shape)}
        count += weight.size
        if bias is not None:
            bname = f"layer{idx:02d}.bias.f32"
            write_blob(out / bname, bias)
            entry["bias"] = bname
            entry["bias_shape"] = list(bias.shape)
            count += bias.size
        params[str(idx)] = entry

    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "name": name or model.__class__.__name__.lower(),
        "input_shape": list(input_shape),
        "layers": entries,
        "params": params,
    }
    import json
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1,
                                                sort_keys=True))

    _self_check(model, out, input_shape, np.random.default_rng(seed))
    return ExportSummary(path=out, layer_count=len(entries),
                         param_count=count)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="snnexport",
        description="Export a PyTorch checkpoint to a spikebit model bundle.")
    parser.add_argument("checkpoint", help="torch.save()d module file")
    parser.add_argument("out", help="output bundle directory")
    parser.add_argument("--input-shape", required=True,
                        help="channels,height,width")
    parser.add_argument("--name", help="model name recorded in the manifest")
    args = parser.parse_args(argv)
    shape = tuple(int(v) for v in args.input_shape.split(","))
    try:
        summary = export(args.checkpoint, args.out, shape, name=args.name)
    except (UnsupportedLayer, SelfCheckError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
