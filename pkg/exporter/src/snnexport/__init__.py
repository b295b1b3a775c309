"""snnexport: convert trained PyTorch models into spikebit model bundles."""

from .export import ExportSummary, SelfCheckError, UnsupportedLayer, export

__version__ = "0.1.0"

__all__ = ["ExportSummary", "SelfCheckError", "UnsupportedLayer", "export",
           "__version__"]
