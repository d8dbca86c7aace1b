"""Capture per-layer readouts from a backbone and write them as a dump."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbones import ModelLoadError, check_backbone, load_model
from .dump import write_lrd

logger = logging.getLogger("lrd_exporter")

READOUTS = ("eos", "mean")


class ExportError(RuntimeError):
    pass


@dataclass
class ExportSpec:
    model: str                       # checkpoint path, or pass `backbone`
    layers: list[int]
    pairs: list[tuple[str, str, str]]  # (pair_id, text, image_path)
    out: str
    readout: str = "mean"
    mean_over: str = "valid"         # "valid" = masked mean, "all" = plain mean
    batch_size: int = 16
    backbone: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.readout not in READOUTS:
            raise ExportError(f"readout {self.readout!r} not one of {READOUTS}")
        if self.mean_over not in ("valid", "all"):
            raise ExportError(f"mean_over {self.mean_over!r} not 'valid' or 'all'")
        if self.batch_size < 1:
            raise ExportError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.pairs:
            raise ExportError("no input pairs given")
        ids = [p[0] for p in self.pairs]
        if len(set(ids)) != len(ids):
            raise ExportError("pair ids are not unique")
        if not self.layers:
            raise ExportError("no layers requested")


def parse_layers(text: str) -> list[int]:
    """'2..5' (inclusive), '0,3,7', or a single index."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            lo_i, hi_i = int(lo), int(hi)
            if hi_i < lo_i:
                raise ValueError("descending range")
            return list(range(lo_i, hi_i + 1))
        return [int(part) for part in text.split(",")]
    except ValueError as exc:
        raise ExportError(f"cannot parse layer list {text!r}: {exc}") from exc


def read_pairs_tsv(path: str | Path) -> list[tuple[str, str, str]]:
    pairs = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh, delimiter="\t")):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise ExportError(
                    f"{path}, line {i + 1}: want pair_id<TAB>text<TAB>image_path, "
                    f"got {len(row)} fields")
            pairs.append((row[0], row[1], row[2]))
    if not pairs:
        raise ExportError(f"{path} holds no pairs")
    return pairs


def _readout(hidden: torch.Tensor, mask: torch.Tensor, spec: ExportSpec) -> torch.Tensor:
    mask = mask.to(hidden.dtype)
    if spec.readout == "eos":
        last = mask.sum(dim=1).long().clamp(min=1) - 1
        return hidden[torch.arange(hidden.shape[0]), last]
    if spec.mean_over == "all":
        return hidden.mean(dim=1)
    denom = mask.sum(dim=1, keepdim=True).clamp(min=1)
    return (hidden * mask.unsqueeze(-1)).sum(dim=1) / denom


def _resolve_layers(spec: ExportSpec, depth: int) -> list[int]:
    bad = [l for l in spec.layers if not (0 <= l < depth)]
    if bad:
        raise ExportError(f"layer indices {bad} outside the model's 0..{depth - 1}")
    layers = sorted(set(spec.layers))
    if depth - 1 not in layers:
        # anchors come from the backbone's own final representation
        layers.append(depth - 1)
        logger.info("adding final block %d as the anchor source", depth - 1)
    return layers


def _forward_batches(model, spec: ExportSpec, layers: list[int], modality: str,
                     ) -> dict[int, np.ndarray]:
    batch_inputs = (model.text_batch if modality == "text" else model.image_batch)
    items = ([p[1] for p in spec.pairs] if modality == "text"
             else [p[2] for p in spec.pairs])
    store: dict[int, torch.Tensor] = {}

    def make_hook(layer: int):
        def hook(module, inputs, output):
            store[layer] = output[0] if isinstance(output, tuple) else output
        return hook

    handles = [model.blocks[l].register_forward_hook(make_hook(l)) for l in layers]
    collected: dict[int, list[np.ndarray]] = {l: [] for l in layers}
    try:
        with torch.no_grad():
            for start in range(0, len(items), spec.batch_size):
                chunk = items[start:start + spec.batch_size]
                try:
                    embeds, mask = batch_inputs(chunk)
                    model.run(embeds, mask)
                except torch.cuda.OutOfMemoryError as exc:
                    raise ExportError(
                        f"out of memory on a {len(chunk)}-item {modality} batch; "
                        f"retry with --batch-size below {spec.batch_size}") from exc
                except RuntimeError as exc:
                    if "out of memory" in str(exc).lower():
                        raise ExportError(
                            f"out of memory on a {len(chunk)}-item {modality} batch; "
                            f"retry with --batch-size below {spec.batch_size}") from exc
                    raise
                missing = [l for l in layers if l not in store]
                if missing:
                    raise ExportError(
                        f"run() never drove blocks {missing}; the adapter must "
                        "execute every block")
                for l in layers:
                    vec = _readout(store[l], mask, spec)
                    collected[l].append(
                        vec.detach().to(torch.float32).cpu().numpy())
                store.clear()
    finally:
        for h in handles:
            h.remove()
    return {l: np.concatenate(parts, axis=0) for l, parts in collected.items()}


def export_readouts(spec: ExportSpec) -> tuple[Path, Path]:
    """Run the backbone over every pair and write the dump.

    Returns (payload_path, manifest_path). Hidden states keep the model's
    native precision through the readout; the cast to float32 happens at
    collection, so the written dump is exactly what a 32-bit reader sees.
    """
    if spec.backbone is not None:
        model = spec.backbone
        check_backbone(model)
    else:
        try:
            model = load_model(spec.model)
        except ModelLoadError as exc:
            raise ExportError(str(exc)) from exc
    layers = _resolve_layers(spec, len(model.blocks))
    text = _forward_batches(model, spec, layers, "text")
    vision = _forward_batches(model, spec, layers, "vision")
    text_stack = np.stack([text[l] for l in layers])
    vision_stack = np.stack([vision[l] for l in layers])
    final_layer = len(model.blocks) - 1
    provenance = (f"lrd-exporter model={spec.model} readout={spec.readout} "
                  f"mean_over={spec.mean_over} layers={layers}")
    paths = write_lrd(spec.out, layers, final_layer, text_stack, vision_stack,
                      [p[0] for p in spec.pairs], provenance=provenance)
    logger.info("exported %d pairs x %d layers (dim %d) -> %s",
                len(spec.pairs), len(layers), text_stack.shape[2], paths[0])
    return paths
