"""Synthetic layer-readout datasets with known planted structure.

Every dataset is built from a latent per-pair code: a unit-normalized
seeded Gaussian anchor matrix G of shape (n_pairs, dim). The final layer
of each modality is G plus independent small noise, so the cross-modal
anchors of real pipelines are reproduced exactly. Non-final layers come
in four kinds:

    aligned              G + fresh per-modality noise (anchor_sigma)
    noisy(sigma)         G + fresh per-modality noise (sigma)
    rotated(seed)        fixed orthogonal rotation of an aligned draw,
                         the same rotation for both modalities
    sparse(support, snr) the pair code survives only in the first
                         `support` coordinates at per-coordinate
                         signal-to-noise `snr`; the remaining coordinates
                         are pair-independent noise

Generation is fully deterministic in the config seed: the rng is consumed
in a fixed order (anchors, then layers in list order, text before vision).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .repr_store import LayerReadoutDataset, validate

LAYER_KINDS = ("aligned", "noisy", "rotated", "sparse")


@dataclass
class LayerSpec:
    """One stored layer. `index` is the layer index carried into the dump."""

    index: int
    kind: str = "aligned"
    sigma: float = 0.0            # noisy only
    rotation_seed: int = 0        # rotated only
    support: int = 0              # sparse only: number of signal coordinates
    snr: float = 1.0              # sparse only: per-coordinate signal-to-noise

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}, want one of {LAYER_KINDS}")


@dataclass
class SynthConfig:
    n_pairs: int = 512
    dim: int = 32
    seed: int = 42
    anchor_sigma: float = 0.01
    layer_specs: list[LayerSpec] = field(default_factory=list)
    final_layer: int = -1         # -1: last entry of layer_specs
    provenance: str = "synth"

    def resolved_final(self) -> int:
        if self.final_layer >= 0:
            return self.final_layer
        if not self.layer_specs:
            raise ValueError("config lists no layers")
        return self.layer_specs[-1].index


def rotation_matrix(dim: int, seed: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix: QR of a seeded Gaussian with the
    sign of diag(R) folded into Q so the draw is unbiased."""
    g = np.random.default_rng(seed).standard_normal((dim, dim))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


def sparse_support(spec: LayerSpec) -> np.ndarray:
    """Ground-truth signal coordinates of a sparse layer: the first `support`."""
    if spec.kind != "sparse":
        raise ValueError(f"layer {spec.index} is {spec.kind!r}, not sparse")
    return np.arange(spec.support)


def _rotation_seed(config: SynthConfig, spec: LayerSpec) -> int:
    # Stable derivation so the planted rotation is recoverable from the config.
    return (config.seed * 1_000_003 + spec.rotation_seed * 101 + spec.index) % (2**31 - 1)


def planted_rotation(config: SynthConfig, layer: int) -> np.ndarray:
    """Recompute the exact rotation planted at `layer`."""
    for spec in config.layer_specs:
        if spec.index == layer:
            if spec.kind != "rotated":
                raise ValueError(f"layer {layer} is {spec.kind!r}, not rotated")
            return rotation_matrix(config.dim, _rotation_seed(config, spec))
    raise ValueError(f"layer {layer} not in config")


def generate(config: SynthConfig) -> LayerReadoutDataset:
    """Draw the dataset described by `config`. Bit-identical for a fixed seed."""
    if not config.layer_specs:
        raise ValueError("config lists no layers")
    final = config.resolved_final()
    indices = [s.index for s in config.layer_specs]
    if final not in indices:
        raise ValueError(f"final layer {final} not among layer indices {indices}")
    final_spec = next(s for s in config.layer_specs if s.index == final)
    if final_spec.kind != "aligned":
        raise ValueError(f"final layer must be aligned, got {final_spec.kind!r}")

    n, d = config.n_pairs, config.dim
    rng = np.random.default_rng(config.seed)
    anchors = rng.standard_normal((n, d))
    anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)

    text = np.empty((len(indices), n, d))
    vision = np.empty_like(text)
    for pos, spec in enumerate(config.layer_specs):
        for modality, out in (("text", text), ("vision", vision)):
            out[pos] = _draw_layer(anchors, spec, config, rng)
    ds = LayerReadoutDataset(
        dim=d,
        layers=indices,
        final_layer=final,
        text_readouts=text.astype(np.float32),
        vision_readouts=vision.astype(np.float32),
        pair_ids=[f"pair{i:06d}" for i in range(n)],
        split_tag="unsplit",
        hard_negatives=None,
        provenance=config.provenance,
    )
    validate(ds)
    return ds


def _draw_layer(anchors: np.ndarray, spec: LayerSpec, config: SynthConfig,
                rng: np.random.Generator) -> np.ndarray:
    n, d = anchors.shape
    if spec.kind == "aligned":
        return anchors + config.anchor_sigma * rng.standard_normal((n, d))
    if spec.kind == "noisy":
        return anchors + spec.sigma * rng.standard_normal((n, d))
    if spec.kind == "rotated":
        base = anchors + config.anchor_sigma * rng.standard_normal((n, d))
        rot = rotation_matrix(d, _rotation_seed(config, spec))
        return base @ rot.T
    if spec.kind == "sparse":
        s = spec.support
        if not (0 < s <= d):
            raise ValueError(f"sparse support {s} outside (0, {d}]")
        if spec.snr <= 0:
            raise ValueError(f"sparse snr must be positive, got {spec.snr}")
        out = np.empty((n, d))
        # The surviving code sits at the anchor's per-coordinate scale
        # (~1/sqrt(d) for unit-norm anchors); snr fixes the ratio of that
        # scale to the within-support noise.
        out[:, :s] = anchors[:, :s] + rng.standard_normal((n, s)) / (spec.snr * np.sqrt(d))
        # Background coordinates carry no pair information and sit below the
        # per-coordinate scale of a unit-norm code.
        out[:, s:] = (0.3 / np.sqrt(d)) * rng.standard_normal((n, d - s))
        return out
    raise ValueError(f"unknown layer kind {spec.kind!r}")
