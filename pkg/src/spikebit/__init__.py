"""spikebit: compiler and cycle-cost simulator for a bit-serial spiking CNN
accelerator using radix-weighted (binary-digit) spike trains."""

from .encode import QuantConfig
from .model import Network, LayerSpec, load_model, save_model, infer_shapes
from .pipeline import (Bundle, CompileResult, compile_network, load_bundle,
                       run_bundle, simulate, write_bundle)
from .plan import DesignVars, HardwarePlan

__version__ = "0.1.0"

__all__ = [
    "Bundle", "CompileResult", "DesignVars", "HardwarePlan", "LayerSpec",
    "Network", "QuantConfig", "compile_network", "infer_shapes",
    "load_bundle", "load_model", "run_bundle", "save_model", "simulate",
    "write_bundle", "__version__",
]
