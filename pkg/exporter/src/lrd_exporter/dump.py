"""Writer for the layer-readout dump format.

This is the whole integration surface with the consumer side: a binary
payload plus a JSON manifest. Layout, integers little-endian:

    magic   b"LRD1"
    u32     format version (1)
    u32     dim
    u32     n_layers
    u32     n_pairs
    u32[n_layers]   layer indices, storage order
    u32     final layer index
    f32[n_layers][n_pairs][dim]   text readouts, C order
    f32[n_layers][n_pairs][dim]   vision readouts, C order

The manifest carries pair ids, provenance, the split tag, optional hard
negatives, and repeats the final layer. Readers reject non-finite values,
so the writer refuses them up front.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LRD1"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIIII")


class DumpWriteError(ValueError):
    pass


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise DumpWriteError(message)


def write_lrd(path: str | Path,
              layers: list[int],
              final_layer: int,
              text_readouts: np.ndarray,
              vision_readouts: np.ndarray,
              pair_ids: list[str],
              provenance: str = "") -> tuple[Path, Path]:
    """Write payload + manifest; returns (payload_path, manifest_path)."""
    text = np.ascontiguousarray(text_readouts, dtype="<f4")
    vision = np.ascontiguousarray(vision_readouts, dtype="<f4")
    _check(text.ndim == 3, f"text readouts must be (layers, pairs, dim), got {text.shape}")
    _check(text.shape == vision.shape,
           f"modality shapes differ: {text.shape} vs {vision.shape}")
    n_layers, n_pairs, dim = text.shape
    _check(len(layers) == n_layers, "layer list does not match readout array")
    _check(len(set(layers)) == n_layers, f"duplicate layer indices in {layers}")
    _check(all(l >= 0 for l in layers), f"negative layer index in {layers}")
    _check(final_layer in layers, f"final layer {final_layer} not among {layers}")
    _check(len(pair_ids) == n_pairs, "pair id list does not match readout array")
    _check(len(set(pair_ids)) == n_pairs, "pair ids are not unique")
    _check(n_pairs > 0 and dim > 0, "empty dump")
    _check(bool(np.isfinite(text).all()) and bool(np.isfinite(vision).all()),
           "readouts contain NaN or Inf")

    payload = b"".join([
        _HEADER.pack(MAGIC, FORMAT_VERSION, dim, n_layers, n_pairs),
        struct.pack(f"<{n_layers}I", *layers),
        struct.pack("<I", final_layer),
        text.tobytes(),
        vision.tobytes(),
    ])
    manifest = json.dumps({
        "version": FORMAT_VERSION,
        "pair_ids": list(pair_ids),
        "provenance": provenance,
        "split": "unsplit",
        "hard_negatives": None,
        "final_layer": final_layer,
    }, indent=1)

    payload_path = Path(path)
    if payload_path.suffix == ".lrd":
        manifest_path = payload_path.with_suffix(".manifest.json")
    else:
        manifest_path = payload_path.with_name(payload_path.name + ".manifest.json")
    payload_path.write_bytes(payload)
    manifest_path.write_text(manifest)
    return payload_path, manifest_path
