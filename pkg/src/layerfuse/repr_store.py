"""Layer-readout dump format: binary payload plus JSON manifest.

Payload layout, all integers little-endian:

    magic   b"LRD1"
    u32     format version (currently 1)
    u32     dim
    u32     n_layers
    u32     n_pairs
    u32[n_layers]   layer indices, in storage order
    u32     final layer index
    f32[n_layers][n_pairs][dim]   text readouts, C order
    f32[n_layers][n_pairs][dim]   vision readouts, C order

Both modality blocks live in a single payload so pairing can never drift.
Pair ids, provenance, split tag and hard negatives travel in the manifest,
never in the payload.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"LRD1"
FORMAT_VERSION = 1
SPLIT_TAGS = ("train", "val", "test", "unsplit")

_HEADER = struct.Struct("<4sIIII")


class DumpError(ValueError):
    """Malformed dump or violated dataset invariant.

    ``code`` is stable and machine-checkable: bad_magic, version_mismatch,
    truncated, trailing_bytes, non_finite, pair_count_mismatch,
    final_layer_mismatch, duplicate_pair_ids, bad_layers, bad_hard_negative,
    bad_split_tag, bad_shape, empty_split, manifest_mismatch.
    """

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass
class DumpManifest:
    """Sidecar document describing one payload."""

    format_version: int
    pair_ids: list[str]
    provenance: str
    split_tag: str
    final_layer: int
    hard_negatives: Optional[list[list[int]]] = None

    def to_json(self) -> str:
        doc = {
            "version": self.format_version,
            "pair_ids": self.pair_ids,
            "provenance": self.provenance,
            "split": self.split_tag,
            "hard_negatives": self.hard_negatives,
            "final_layer": self.final_layer,
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DumpManifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DumpError("manifest_mismatch", f"manifest is not valid JSON: {exc}") from exc
        for key in ("version", "pair_ids", "provenance", "split", "final_layer"):
            if key not in doc:
                raise DumpError("manifest_mismatch", f"manifest missing field {key!r}")
        return cls(
            format_version=int(doc["version"]),
            pair_ids=[str(p) for p in doc["pair_ids"]],
            provenance=str(doc["provenance"]),
            split_tag=str(doc["split"]),
            final_layer=int(doc["final_layer"]),
            hard_negatives=doc.get("hard_negatives"),
        )


@dataclass
class LayerReadoutDataset:
    """Paired text/vision readouts for a set of layers of one backbone.

    ``text_readouts`` and ``vision_readouts`` are (n_layers, n_pairs, dim)
    float32 arrays indexed in the order of ``layers``. Row i of both
    modalities belongs to the same pair.
    """

    dim: int
    layers: list[int]
    final_layer: int
    text_readouts: np.ndarray
    vision_readouts: np.ndarray
    pair_ids: list[str]
    split_tag: str = "unsplit"
    hard_negatives: Optional[list[list[int]]] = None
    provenance: str = ""

    @property
    def n_pairs(self) -> int:
        return len(self.pair_ids)

    def layer_pos(self, layer: int) -> int:
        try:
            return self.layers.index(layer)
        except ValueError:
            raise KeyError(f"layer {layer} not stored (have {self.layers})") from None

    def text(self, layer: int) -> np.ndarray:
        return self.text_readouts[self.layer_pos(layer)]

    def vision(self, layer: int) -> np.ndarray:
        return self.vision_readouts[self.layer_pos(layer)]

    def anchors_text(self) -> np.ndarray:
        """Final-layer text readouts, the text-side anchor set."""
        return self.text(self.final_layer)

    def anchors_vision(self) -> np.ndarray:
        return self.vision(self.final_layer)

    def manifest(self) -> DumpManifest:
        return DumpManifest(
            format_version=FORMAT_VERSION,
            pair_ids=list(self.pair_ids),
            provenance=self.provenance,
            split_tag=self.split_tag,
            final_layer=self.final_layer,
            hard_negatives=None if self.hard_negatives is None else [list(h) for h in self.hard_negatives],
        )


def validate(ds: LayerReadoutDataset) -> None:
    """Check every dataset invariant; raise DumpError on the first violation."""
    if ds.dim <= 0:
        raise DumpError("bad_shape", f"dim must be positive, got {ds.dim}")
    if not ds.layers:
        raise DumpError("bad_layers", "layer list is empty")
    if any(l < 0 for l in ds.layers):
        raise DumpError("bad_layers", f"negative layer index in {ds.layers}")
    if len(set(ds.layers)) != len(ds.layers):
        raise DumpError("bad_layers", f"duplicate layer indices in {ds.layers}")
    if ds.final_layer not in ds.layers:
        raise DumpError("final_layer_mismatch", f"final layer {ds.final_layer} not in {ds.layers}")
    if ds.split_tag not in SPLIT_TAGS:
        raise DumpError("bad_split_tag", f"split tag {ds.split_tag!r} not one of {SPLIT_TAGS}")
    n = len(ds.pair_ids)
    if n == 0:
        raise DumpError("bad_shape", "dataset holds zero pairs")
    if len(set(ds.pair_ids)) != n:
        raise DumpError("duplicate_pair_ids", "pair ids are not unique")
    want = (len(ds.layers), n, ds.dim)
    for name, arr in (("text", ds.text_readouts), ("vision", ds.vision_readouts)):
        if arr.shape != want:
            raise DumpError("bad_shape", f"{name} readouts shaped {arr.shape}, want {want}")
        if arr.dtype != np.float32:
            raise DumpError("bad_shape", f"{name} readouts dtype {arr.dtype}, want float32")
        if not np.all(np.isfinite(arr)):
            raise DumpError("non_finite", f"{name} readouts contain NaN or Inf")
    if ds.hard_negatives is not None:
        if len(ds.hard_negatives) != n:
            raise DumpError("bad_hard_negative", "hard-negative list length differs from pair count")
        for i, negs in enumerate(ds.hard_negatives):
            for j in negs:
                if not (0 <= j < n) or j == i:
                    raise DumpError("bad_hard_negative", f"pair {i} lists invalid hard negative {j}")


def write_dump(ds: LayerReadoutDataset, manifest: Optional[DumpManifest] = None) -> tuple[bytes, str]:
    """Serialize to (payload bytes, manifest JSON). Refuses non-finite values."""
    validate(ds)
    if manifest is None:
        manifest = ds.manifest()
    _check_manifest_against(manifest, ds)
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, ds.dim, len(ds.layers), ds.n_pairs),
        struct.pack(f"<{len(ds.layers)}I", *ds.layers),
        struct.pack("<I", ds.final_layer),
        np.ascontiguousarray(ds.text_readouts, dtype="<f4").tobytes(),
        np.ascontiguousarray(ds.vision_readouts, dtype="<f4").tobytes(),
    ]
    return b"".join(parts), manifest.to_json()


def _check_manifest_against(manifest: DumpManifest, ds: LayerReadoutDataset) -> None:
    if manifest.format_version != FORMAT_VERSION:
        raise DumpError("version_mismatch", f"manifest version {manifest.format_version} != {FORMAT_VERSION}")
    if len(manifest.pair_ids) != ds.n_pairs:
        raise DumpError("pair_count_mismatch",
                        f"manifest lists {len(manifest.pair_ids)} pairs, payload holds {ds.n_pairs}")
    if manifest.final_layer != ds.final_layer:
        raise DumpError("final_layer_mismatch",
                        f"manifest final layer {manifest.final_layer} != payload {ds.final_layer}")
    if manifest.split_tag != ds.split_tag:
        raise DumpError("manifest_mismatch",
                        f"manifest split {manifest.split_tag!r} != dataset {ds.split_tag!r}")
    if manifest.hard_negatives != ds.hard_negatives:
        raise DumpError("manifest_mismatch", "manifest hard negatives differ from dataset")


def read_dump(payload: bytes, manifest_text: str) -> LayerReadoutDataset:
    """Parse and validate a payload/manifest pair.

    Every malformation maps to a distinct DumpError code so callers can
    tell a truncation from a stale-format file from a corrupted body.
    """
    manifest = DumpManifest.from_json(manifest_text)
    if len(payload) < _HEADER.size:
        raise DumpError("truncated", f"payload is {len(payload)} bytes, header needs {_HEADER.size}")
    magic, version, dim, n_layers, n_pairs = _HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise DumpError("bad_magic", f"leading bytes {magic!r} are not {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise DumpError("version_mismatch", f"payload version {version}, reader supports {FORMAT_VERSION}")
    off = _HEADER.size
    need = off + 4 * n_layers + 4
    if len(payload) < need:
        raise DumpError("truncated", "payload ends inside the layer table")
    layers = list(struct.unpack_from(f"<{n_layers}I", payload, off))
    off += 4 * n_layers
    (final_layer,) = struct.unpack_from("<I", payload, off)
    off += 4
    block = n_layers * n_pairs * dim * 4
    expected = off + 2 * block
    if len(payload) < expected:
        raise DumpError("truncated",
                        f"payload is {len(payload)} bytes, layout implies {expected}")
    if len(payload) > expected:
        raise DumpError("trailing_bytes",
                        f"payload is {len(payload)} bytes, layout implies {expected}")
    shape = (n_layers, n_pairs, dim)
    text = np.frombuffer(payload, dtype="<f4", count=n_layers * n_pairs * dim, offset=off).reshape(shape)
    off += block
    vision = np.frombuffer(payload, dtype="<f4", count=n_layers * n_pairs * dim, offset=off).reshape(shape)
    if manifest.split_tag not in SPLIT_TAGS:
        raise DumpError("bad_split_tag", f"manifest split {manifest.split_tag!r} not one of {SPLIT_TAGS}")
    ds = LayerReadoutDataset(
        dim=dim,
        layers=layers,
        final_layer=final_layer,
        text_readouts=np.array(text, dtype=np.float32),
        vision_readouts=np.array(vision, dtype=np.float32),
        pair_ids=list(manifest.pair_ids),
        split_tag=manifest.split_tag,
        hard_negatives=manifest.hard_negatives,
        provenance=manifest.provenance,
    )
    validate(ds)
    _check_manifest_against(manifest, ds)
    return ds


def manifest_path_for(payload_path: str | Path) -> Path:
    """data.lrd -> data.manifest.json, sitting next to the payload."""
    p = Path(payload_path)
    if p.suffix == ".lrd":
        return p.with_suffix(".manifest.json")
    return p.with_name(p.name + ".manifest.json")


def save_dump(ds: LayerReadoutDataset, payload_path: str | Path,
              manifest: Optional[DumpManifest] = None) -> Path:
    payload, manifest_text = write_dump(ds, manifest)
    p = Path(payload_path)
    p.write_bytes(payload)
    mp = manifest_path_for(p)
    mp.write_text(manifest_text)
    return mp


def load_dump(payload_path: str | Path) -> LayerReadoutDataset:
    p = Path(payload_path)
    mp = manifest_path_for(p)
    if not p.exists():
        raise DumpError("truncated", f"payload file {p} does not exist")
    if not mp.exists():
        raise DumpError("manifest_mismatch", f"manifest file {mp} does not exist")
    return read_dump(p.read_bytes(), mp.read_text())


def split(ds: LayerReadoutDataset, train_fraction: float, seed: int,
          ) -> tuple[LayerReadoutDataset, LayerReadoutDataset]:
    """Deterministic disjoint train/val partition of the pair axis.

    Hard negatives are remapped to within-split indices; references into
    the other split are dropped. Sizes follow floor(n * train_fraction).
    """
    n = ds.n_pairs
    if not (0.0 < train_fraction < 1.0):
        raise DumpError("empty_split", f"train fraction {train_fraction} outside (0, 1)")
    n_train = math.floor(n * train_fraction)
    if n_train == 0 or n_train == n:
        raise DumpError("empty_split",
                        f"fraction {train_fraction} of {n} pairs leaves an empty split")
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    val_idx = np.sort(perm[n_train:])
    return _subset(ds, train_idx, "train"), _subset(ds, val_idx, "val")


def _subset(ds: LayerReadoutDataset, idx: np.ndarray, tag: str) -> LayerReadoutDataset:
    negs = None
    if ds.hard_negatives is not None:
        old_to_new = {int(old): new for new, old in enumerate(idx)}
        negs = []
        for old in idx:
            kept = [old_to_new[j] for j in ds.hard_negatives[int(old)] if j in old_to_new]
            negs.append(kept)
    return LayerReadoutDataset(
        dim=ds.dim,
        layers=list(ds.layers),
        final_layer=ds.final_layer,
        text_readouts=np.ascontiguousarray(ds.text_readouts[:, idx, :]),
        vision_readouts=np.ascontiguousarray(ds.vision_readouts[:, idx, :]),
        pair_ids=[ds.pair_ids[int(i)] for i in idx],
        split_tag=tag,
        hard_negatives=negs,
        provenance=ds.provenance,
    )
