"""Bridge from encoder backbones to layer-readout (.lrd) dumps."""

from .backbones import ModelLoadError, check_backbone, load_model
from .dump import DumpWriteError, write_lrd
from .export import (
    ExportError,
    ExportSpec,
    export_readouts,
    parse_layers,
    read_pairs_tsv,
)

__all__ = [
    "DumpWriteError",
    "ExportError",
    "ExportSpec",
    "ModelLoadError",
    "check_backbone",
    "export_readouts",
    "load_model",
    "parse_layers",
    "read_pairs_tsv",
    "write_lrd",
]
