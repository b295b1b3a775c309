"""Network intermediate representation and model bundle I/O.

A model bundle is a directory holding a JSON manifest (``model.json``) plus one
little-endian float32 blob per parameter tensor. The manifest declares the
architecture; dimensions are re-derived by :func:`infer_shapes` and every
parameter tensor is validated against the chained shapes at load time.

Manifest schema (version 1)::

    {
      "format": "spikebit-model",
      "version": 1,
      "name": "lenet5",
      "input_shape": [1, 32, 32],
      "layers": [
        {"kind": "conv", "out_channels": 6, "kernel": 5, "stride": 1, "padding": 0},
        {"kind": "pool", "kernel": 2, "stride": 2, "mode": "avg"},
        {"kind": "flatten"},
        {"kind": "linear", "features_out": 84}
      ],
      "params": {
        "0": {"weight": "layer00.weight.f32", "shape": [6, 1, 5, 5]}
      }
    }

Feature maps are square only; rectangular inputs are rejected. An optional
per-output-channel ``bias`` entry is accepted as a format extension (off by
default everywhere else in the pipeline).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import MissingParams, ParseError, ShapeError

MANIFEST_NAME = "model.json"
FORMAT_NAME = "spikebit-model"
FORMAT_VERSION = 1

CONV = "conv"
POOL = "pool"
LINEAR = "linear"
FLATTEN = "flatten"

POOL_AVG = "avg"
POOL_MAX = "max"


@dataclass
class LayerSpec:
    """One layer of the architecture; dim fields are filled by infer_shapes."""

    kind: str
    kernel: int = 0
    stride: int = 1
    padding: int = 0            # per side
    out_channels: int = 0
    features_out: int = 0
    pool_mode: str = POOL_AVG
    # derived
    in_channels: int = 0
    in_dim: int = 0
    out_dim: int = 0
    features_in: int = 0


@dataclass
class Params:
    weight: np.ndarray
    bias: np.ndarray | None = None


@dataclass
class Network:
    name: str
    input_shape: tuple[int, int, int]   # (channels, height, width)
    layers: list[LayerSpec]
    params: dict[int, Params] = field(default_factory=dict)

    def compute_layers(self):
        """Indices of layers that execute on hardware (flatten excluded)."""
        return [i for i, l in enumerate(self.layers) if l.kind != FLATTEN]

    def has_bias(self):
        return any(p.bias is not None for p in self.params.values())

    def param_count(self):
        total = 0
        for p in self.params.values():
            total += p.weight.size
            if p.bias is not None:
                total += p.bias.size
        return total


def conv_out_dim(d_in, kernel, stride, padding):
    return (d_in + 2 * padding - kernel) // stride + 1


def pool_out_dim(d_in, stride):
    return d_in // stride


def infer_shapes(net: Network) -> Network:
    """Fill in_dim/out_dim/in_channels/features for every layer (idempotent)."""
    c, h, w = net.input_shape
    if h != w:
        raise ShapeError(f"feature maps must be square, got {h}x{w}")
    if not net.layers:
        raise ShapeError("network has no layers")

    dim = h
    feats = None
    seen_flatten = False
    layers = []
    for i, spec in enumerate(net.layers):
        spec = replace(spec)
        if spec.kind == CONV:
            if seen_flatten:
                raise ShapeError(f"layer {i}: 2D conv after flatten")
            if spec.kernel < 1 or spec.stride < 1 or spec.padding < 0:
                raise ShapeError(f"layer {i}: bad kernel/stride/padding")
            spec.in_channels = c
            spec.in_dim = dim
            spec.out_dim = conv_out_dim(dim, spec.kernel, spec.stride, spec.padding)
            if spec.out_dim < 1:
                raise ShapeError(f"layer {i}: conv output dim {spec.out_dim} < 1")
            c, dim = spec.out_channels, spec.out_dim
        elif spec.kind == POOL:
            if seen_flatten:
                raise ShapeError(f"layer {i}: 2D pool after flatten")
            if spec.kernel != spec.stride:
                raise ShapeError(f"layer {i}: pool requires kernel == stride")
            if spec.padding != 0:
                raise ShapeError(f"layer {i}: pool padding unsupported")
            if spec.pool_mode not in (POOL_AVG, POOL_MAX):
                raise ShapeError(f"layer {i}: unknown pool mode {spec.pool_mode!r}")
            if spec.pool_mode == POOL_AVG and spec.kernel & (spec.kernel - 1):
                raise ShapeError(f"layer {i}: avg pool kernel must be a power of two")
            spec.in_channels = c
            spec.out_channels = c
            spec.in_dim = dim
            spec.out_dim = pool_out_dim(dim, spec.stride)
            if spec.out_dim < 1:
                raise ShapeError(f"layer {i}: pool output dim < 1")
            dim = spec.out_dim
        elif spec.kind == FLATTEN:
            if seen_flatten:
                raise ShapeError(f"layer {i}: more than one flatten boundary")
            if dim != 1:
                raise ShapeError(
                    f"layer {i}: flatten requires 1x1 feature maps, got {dim}x{dim}")
            seen_flatten = True
            feats = c
            spec.features_in = feats
            spec.features_out = feats
        elif spec.kind == LINEAR:
            if not seen_flatten:
                raise ShapeError(f"layer {i}: linear layer before flatten boundary")
            spec.features_in = feats
            if spec.features_out < 1:
                raise ShapeError(f"layer {i}: linear features_out < 1")
            feats = spec.features_out
        else:
            raise ShapeError(f"layer {i}: unknown kind {spec.kind!r}")
        layers.append(spec)

    if any(l.kind == LINEAR for l in layers) and layers[-1].kind == FLATTEN:
        raise ShapeError("flatten must be followed by a linear layer")
    if layers[-1].kind == FLATTEN:
        raise ShapeError("network cannot end on a flatten boundary")
    return Network(net.name, net.input_shape, layers, net.params)


def validate(net: Network) -> Network:
    """Re-infer shapes and check every parameter tensor against them."""
    net = infer_shapes(net)
    for i, spec in enumerate(net.layers):
        if spec.kind == CONV:
            p = net.params.get(i)
            if p is None:
                raise MissingParams(f"layer {i}: conv has no weights")
            want = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
            if tuple(p.weight.shape) != want:
                raise ShapeError(
                    f"layer {i}: weight shape {tuple(p.weight.shape)} != {want}")
            if p.bias is not None and tuple(p.bias.shape) != (spec.out_channels,):
                raise ShapeError(f"layer {i}: bias shape mismatch")
        elif spec.kind == LINEAR:
            p = net.params.get(i)
            if p is None:
                raise MissingParams(f"layer {i}: linear has no weights")
            want = (spec.features_out, spec.features_in)
            if tuple(p.weight.shape) != want:
                raise ShapeError(
                    f"layer {i}: weight shape {tuple(p.weight.shape)} != {want}")
            if p.bias is not None and tuple(p.bias.shape) != (spec.features_out,):
                raise ShapeError(f"layer {i}: bias shape mismatch")
        elif i in net.params:
            raise ShapeError(f"layer {i}: {spec.kind} layer cannot carry parameters")
        if i in net.params:
            for arr in (net.params[i].weight, net.params[i].bias):
                if arr is not None and not np.all(np.isfinite(arr)):
                    raise ShapeError(f"layer {i}: parameter tensor has non-finite values")
    return net


# ----------------------------------------------------------------------------
# Bundle I/O
# ----------------------------------------------------------------------------

def read_blob(path, shape):
    """Read a little-endian float32 blob with the given shape."""
    data = np.fromfile(path, dtype="<f4")
    want = int(np.prod(shape))
    if data.size != want:
        raise ParseError(f"{path}: expected {want} float32 values, got {data.size}")
    return data.reshape(shape)


def write_blob(path, arr):
    np.asarray(arr, dtype="<f4").tofile(path)


def _layer_from_entry(i, entry):
    kind = entry.get("kind")
    if kind == CONV:
        return LayerSpec(CONV, kernel=int(entry["kernel"]),
                         stride=int(entry.get("stride", 1)),
                         padding=int(entry.get("padding", 0)),
                         out_channels=int(entry["out_channels"]))
    if kind == POOL:
        return LayerSpec(POOL, kernel=int(entry["kernel"]),
                         stride=int(entry.get("stride", entry["kernel"])),
                         pool_mode=entry.get("mode", POOL_AVG))
    if kind == FLATTEN:
        return LayerSpec(FLATTEN)
    if kind == LINEAR:
        return LayerSpec(LINEAR, features_out=int(entry["features_out"]))
    raise ParseError(f"layer {i}: unknown kind {kind!r}")


def load_model(path) -> Network:
    """Load and validate a model bundle directory."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ParseError(f"{manifest_path} not found")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{manifest_path}: {e}") from e

    if manifest.get("format") != FORMAT_NAME:
        raise ParseError(f"not a {FORMAT_NAME} manifest")
    if "version" not in manifest:
        raise ParseError("manifest missing mandatory version field")
    if int(manifest["version"]) != FORMAT_VERSION:
        raise ParseError(f"unsupported manifest version {manifest['version']}")

    try:
        input_shape = tuple(int(v) for v in manifest["input_shape"])
        entries = manifest["layers"]
        name = manifest.get("name", path.name)
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"malformed manifest: {e}") from e
    if len(input_shape) != 3:
        raise ParseError("input_shape must be [channels, height, width]")

    layers = [_layer_from_entry(i, e) for i, e in enumerate(entries)]

    params = {}
    for key, entry in manifest.get("params", {}).items():
        i = int(key)
        shape = tuple(int(v) for v in entry["shape"])
        weight = read_blob(path / entry["weight"], shape)
        bias = None
        if "bias" in entry:
            bias = read_blob(path / entry["bias"], tuple(entry["bias_shape"]))
        params[i] = Params(weight=weight, bias=bias)

    return validate(Network(name, input_shape, layers, params))


def save_model(net: Network, path) -> None:
    """Write a validated network as a model bundle directory."""
    net = validate(net)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    entries = []
    for spec in net.layers:
        if spec.kind == CONV:
            entries.append({"kind": CONV, "out_channels": spec.out_channels,
                            "kernel": spec.kernel, "stride": spec.stride,
                            "padding": spec.padding})
        elif spec.kind == POOL:
            entries.append({"kind": POOL, "kernel": spec.kernel,
                            "stride": spec.stride, "mode": spec.pool_mode})
        elif spec.kind == FLATTEN:
            entries.append({"kind": FLATTEN})
        else:
            entries.append({"kind": LINEAR, "features_out": spec.features_out})

    params = {}
    for i, p in sorted(net.params.items()):
        wname = f"layer{i:02d}.weight.f32"
        write_blob(path / wname, p.weight)
        entry = {"weight": wname, "shape": list(p.weight.shape)}
        if p.bias is not None:
            bname = f"layer{i:02d}.bias.f32"
            write_blob(path / bname, p.bias)
            entry["bias"] = bname
            entry["bias_shape"] = list(p.bias.shape)
        params[str(i)] = entry

    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "name": net.name,
        "input_shape": list(net.input_shape),
        "layers": entries,
        "params": params,
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))
