"""Sparse multi-layer fusion into a single retrieval embedding.

A processed readout of layer l is the masked raw readout, realigned for
norm-kind layers:

    base layer   h = m * x
    norm layer   h = W_hat (m * x)

(the probe's sparse gate p shapes the mask but does not scale h; the head
absorbs per-dimension scale). The fused embedding is a learned weighted
sum with bias across selected layers:

    e = sum_l u_l * h_l + b

initialized to the identity on the final layer (u_final = 1, every other
u_l = 0, b = 0) so training starts exactly at the single-vector baseline.
The head trains with the same InfoNCE machinery as the probes, one
direction (fused text queries against fused vision candidates), in-batch
plus declared hard negatives, decoupled weight decay on u only. The fused
embedding is deliberately not re-normalized; retrieval scores are inner
products.

Ablation variants resolve components differently: `full` keeps the
base/norm partition and trained masks, `all_neurons` fuses raw readouts
(masks forced all-ones, no probes), `all_base` treats every candidate
layer as base kind, `all_norm` realigns every candidate layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .diagnostics import LayerSelection
from .masking import MaskSet
from .probes import (AdamW, ProbeParams, TrainConfig, _batch_plan, _nce_rows,
                     lr_at, normalize_rows)
from .repr_store import LayerReadoutDataset

FUSE_MAGIC = b"MFU1"
VARIANTS = ("full", "all_neurons", "all_base", "all_norm")


def fusion_train_defaults() -> TrainConfig:
    """Head-stage optimization defaults: gentler lr, smaller batches, light
    decay on u, no l1 (sparsity is fixed by the masks at this point)."""
    return TrainConfig(learning_rate=1e-5, batch_size=512, epochs=40,
                       warmup=1.0 / 40.0, weight_decay=1e-4, l1_lambda=0.0,
                       temperature=0.05, seed=42)


@dataclass
class FusionHead:
    layers: list[int]
    u: np.ndarray   # (n_layers, dim)
    b: np.ndarray   # (dim,)

    def __post_init__(self):
        self.layers = list(self.layers)
        self.u = np.asarray(self.u)
        self.b = np.asarray(self.b)
        if self.u.ndim != 2 or self.u.shape[0] != len(self.layers):
            raise ValueError(f"u shaped {self.u.shape} for {len(self.layers)} layers")
        if self.b.shape != (self.u.shape[1],):
            raise ValueError(f"b shaped {self.b.shape}, want ({self.u.shape[1]},)")

    @property
    def dim(self) -> int:
        return self.u.shape[1]


@dataclass
class PipelinePlan:
    """Everything needed to embed one sample: layer set, per-layer kind,
    frozen masks, probes (for realignment), and the fusion head."""

    variant: str
    layers: list[int]
    final_layer: int
    dim: int
    kinds: dict[int, str]
    masks: dict[int, np.ndarray]
    probes: dict[int, ProbeParams]
    head: FusionHead

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.head.layers != self.layers:
            raise ValueError("head layer list differs from plan layer list")
        for l in self.layers:
            if self.kinds[l] not in ("base", "norm"):
                raise ValueError(f"layer {l}: bad kind {self.kinds[l]!r}")
            m = self.masks[l]
            if m.shape != (self.dim,) or m.dtype != np.bool_:
                raise ValueError(f"layer {l}: mask must be ({self.dim},) bool")
            if not m.any():
                raise ValueError(f"layer {l}: empty mask")
            if self.kinds[l] == "norm" and l not in self.probes:
                raise ValueError(f"layer {l} is norm kind but has no probe")


def resolve_components(variant: str, selection: LayerSelection,
                       probes: Optional[Mapping[int, ProbeParams]],
                       mask_set: Optional[MaskSet], dim: int,
                       ) -> tuple[list[int], dict[int, str], dict[int, np.ndarray], dict[int, ProbeParams]]:
    """Turn a variant name plus trained components into the per-layer kind,
    mask, and probe tables the fusion path consumes."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, want one of {VARIANTS}")
    layers = list(selection.s_cand)
    if variant == "all_neurons":
        kinds = {l: "base" for l in layers}
        masks = {l: np.ones(dim, dtype=bool) for l in layers}
        return layers, kinds, masks, {}

    if mask_set is None or probes is None:
        raise ValueError(f"variant {variant!r} needs trained probes and masks")
    if variant == "full":
        kinds = {l: selection.kind_of(l) for l in layers}
    elif variant == "all_base":
        kinds = {l: "base" for l in layers}
    else:
        kinds = {l: "norm" for l in layers}
    masks = {}
    used: dict[int, ProbeParams] = {}
    for l in layers:
        if l not in probes:
            raise ValueError(f"layer {l}: no trained probe")
        if probes[l].kind != kinds[l]:
            raise ValueError(f"layer {l}: variant {variant!r} needs a {kinds[l]} probe, "
                             f"found {probes[l].kind}")
        masks[l] = mask_set.mask_of(l).astype(bool)
        if masks[l].shape != (dim,):
            raise ValueError(f"layer {l}: mask dim {masks[l].shape} != {dim}")
        used[l] = probes[l]
    return layers, kinds, masks, used


def processed_readout(plan: PipelinePlan, layer: int, x: np.ndarray) -> np.ndarray:
    """Masked (and, for norm layers, realigned) readout; x is (..., dim)."""
    if layer not in plan.kinds:
        raise KeyError(f"layer {layer} not in plan")
    return _process(np.asarray(x, dtype=np.float64), plan.kinds[layer],
                    plan.masks[layer], plan.probes.get(layer))


def _process(x: np.ndarray, kind: str, mask: np.ndarray,
             probe: Optional[ProbeParams]) -> np.ndarray:
    h = x * mask
    if kind == "base":
        return h
    if probe is None:
        raise ValueError("norm layer without realignment probe")
    return h @ normalize_rows(probe.w).T


def fuse(plan: PipelinePlan, readouts: Mapping[int, np.ndarray]) -> np.ndarray:
    """Fused embedding for one sample (or a batch) given per-layer readouts."""
    missing = [l for l in plan.layers if l not in readouts]
    if missing:
        raise ValueError(f"missing readouts for layers {missing}")
    u = np.asarray(plan.head.u, dtype=np.float64)
    b = np.asarray(plan.head.b, dtype=np.float64)
    out = None
    for pos, layer in enumerate(plan.layers):
        h = processed_readout(plan, layer, readouts[layer])
        term = u[pos] * h
        out = term if out is None else out + term
    return out + b


def embed_dataset(plan: PipelinePlan, ds: LayerReadoutDataset, modality: str) -> np.ndarray:
    """Fused embeddings for every pair of one modality; (n_pairs, dim)."""
    if modality not in ("text", "vision"):
        raise ValueError(f"modality must be 'text' or 'vision', got {modality!r}")
    grab = ds.text if modality == "text" else ds.vision
    return fuse(plan, {l: grab(l) for l in plan.layers})


def identity_plan(dim: int, final_layer: int) -> PipelinePlan:
    """Single-vector baseline: final layer only, all-ones mask, unit head.

    Embeds every sample to exactly its final-layer readout, so rankings
    match the raw dense baseline bit for bit.
    """
    head = FusionHead(layers=[final_layer], u=np.ones((1, dim)), b=np.zeros(dim))
    return PipelinePlan(variant="full", layers=[final_layer], final_layer=final_layer,
                        dim=dim, kinds={final_layer: "base"},
                        masks={final_layer: np.ones(dim, dtype=bool)},
                        probes={}, head=head)


# ---------------------------------------------------------------------------
# training

@dataclass
class FusionBatch:
    """Processed readout stacks for one batch: (n_layers, b, dim) per side,
    plus gathered hard-negative stacks (n_layers, e, dim)."""

    ht: np.ndarray
    hv: np.ndarray
    extra_hv: np.ndarray
    extra_active: np.ndarray  # (b, e) bool


def _head_apply(u: np.ndarray, b: np.ndarray, stack: np.ndarray) -> np.ndarray:
    # stack (n_layers, n, dim) -> (n, dim)
    return np.einsum("ld,lnd->nd", u, stack) + b


def fusion_loss(head: FusionHead, batch: FusionBatch, config: TrainConfig) -> float:
    loss, _ = _fusion_loss_grad(head, batch, config, want_grad=False)
    return loss


def fusion_grad(head: FusionHead, batch: FusionBatch, config: TrainConfig,
                ) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and analytic gradients w.r.t. u and b. Gradients flow through the
    fused queries and the fused candidates, hard negatives included."""
    return _fusion_loss_grad(head, batch, config, want_grad=True)


def _fusion_loss_grad(head: FusionHead, batch: FusionBatch, config: TrainConfig,
                      want_grad: bool) -> tuple[float, dict[str, np.ndarray]]:
    u = np.asarray(head.u, dtype=np.float64)
    b = np.asarray(head.b, dtype=np.float64)
    ht = np.asarray(batch.ht, dtype=np.float64)
    hv = np.asarray(batch.hv, dtype=np.float64)
    if ht.shape[1] < 2:
        raise ValueError("fusion batches need at least 2 pairs")
    et = _head_apply(u, b, ht)
    ev = _head_apply(u, b, hv)
    has_extra = batch.extra_hv.shape[1] > 0
    e_extra = (_head_apply(u, b, batch.extra_hv) if has_extra
               else np.zeros((0, u.shape[1])))
    loss, dq, dc, dextra = _nce_rows(et, ev, e_extra, batch.extra_active,
                                     config.temperature, candidate_grads=want_grad)
    if not want_grad:
        return loss, {}
    du = (np.einsum("nd,lnd->ld", dq, ht) + np.einsum("nd,lnd->ld", dc, hv))
    db = dq.sum(axis=0) + dc.sum(axis=0)
    if has_extra and dextra is not None:
        du += np.einsum("nd,lnd->ld", dextra, np.asarray(batch.extra_hv, dtype=np.float64))
        db += dextra.sum(axis=0)
    return loss, {"u": du, "b": db}


@dataclass
class FusionTrainResult:
    head: FusionHead
    trace: list[tuple[int, float]]   # (epoch, mean batch loss)


def train_fusion(ds_train: LayerReadoutDataset, variant: str,
                 selection: LayerSelection,
                 probes: Optional[Mapping[int, ProbeParams]],
                 mask_set: Optional[MaskSet],
                 config: Optional[TrainConfig] = None) -> FusionTrainResult:
    """Train the fusion head on frozen probes and masks.

    Starts at the identity warm start, so epoch zero reproduces the
    single-vector baseline ranking exactly. Deterministic for a fixed config.
    """
    cfg = config if config is not None else fusion_train_defaults()
    layers, kinds, masks, used = resolve_components(variant, selection, probes,
                                                    mask_set, ds_train.dim)
    n, d = ds_train.n_pairs, ds_train.dim
    ht = np.empty((len(layers), n, d))
    hv = np.empty_like(ht)
    for pos, l in enumerate(layers):
        ht[pos] = _process(ds_train.text(l).astype(np.float64), kinds[l], masks[l], used.get(l))
        hv[pos] = _process(ds_train.vision(l).astype(np.float64), kinds[l], masks[l], used.get(l))

    u = np.zeros((len(layers), d))
    warm = ds_train.final_layer if ds_train.final_layer in layers else layers[-1]
    u[layers.index(warm)] = 1.0
    values = {"u": u, "b": np.zeros(d)}
    opt = AdamW(values, cfg, decay=("u",))

    plan = _batch_plan(n, cfg.batch_size)
    if not plan:
        raise ValueError(f"dataset of {n} pairs yields no usable batch")
    total_steps = cfg.epochs * len(plan)
    rng = np.random.default_rng(cfg.seed)
    trace: list[tuple[int, float]] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for a, bnd in plan:
            step += 1
            idx = order[a:bnd]
            batch = _gather_fusion_batch(idx, ht, hv, ds_train.hard_negatives)
            head = FusionHead(layers=layers, u=values["u"], b=values["b"])
            loss, grads = fusion_grad(head, batch, cfg)
            opt.step(values, grads, lr_at(step, total_steps, cfg))
            total += loss
        trace.append((epoch, total / len(plan)))
    head = FusionHead(layers=layers,
                      u=values["u"].astype(np.float32),
                      b=values["b"].astype(np.float32))
    return FusionTrainResult(head=head, trace=trace)


def _gather_fusion_batch(idx: np.ndarray, ht: np.ndarray, hv: np.ndarray,
                         hard_negatives: Optional[list[list[int]]]) -> FusionBatch:
    in_batch = {int(i): pos for pos, i in enumerate(idx)}
    extra_ids: list[int] = []
    extra_pos: dict[int, int] = {}
    rows_cols: list[tuple[int, int]] = []
    if hard_negatives is not None:
        for row, i in enumerate(idx):
            for j in hard_negatives[int(i)]:
                if j in in_batch:
                    continue
                if j not in extra_pos:
                    extra_pos[j] = len(extra_ids)
                    extra_ids.append(j)
                rows_cols.append((row, extra_pos[j]))
    active = np.zeros((idx.shape[0], len(extra_ids)), dtype=bool)
    for r, c in rows_cols:
        active[r, c] = True
    extra = np.asarray(extra_ids, dtype=int)
    extra_hv = (hv[:, extra, :] if extra.size
                else np.zeros((ht.shape[0], 0, ht.shape[2])))
    return FusionBatch(ht=ht[:, idx, :], hv=hv[:, idx, :],
                       extra_hv=extra_hv, extra_active=active)


def assemble_plan(variant: str, selection: LayerSelection,
                  probes: Optional[Mapping[int, ProbeParams]],
                  mask_set: Optional[MaskSet], head: FusionHead,
                  dim: int, final_layer: int) -> PipelinePlan:
    """Bundle trained components into a plan, enforcing variant consistency
    (all_neurons forces all-ones masks; all_base/all_norm force kinds)."""
    layers, kinds, masks, used = resolve_components(variant, selection, probes,
                                                    mask_set, dim)
    if head.layers != layers:
        raise ValueError(f"head trained for layers {head.layers}, plan needs {layers}")
    return PipelinePlan(variant=variant, layers=layers, final_layer=final_layer,
                        dim=dim, kinds=kinds, masks=masks, probes=dict(used),
                        head=head)


# ---------------------------------------------------------------------------
# serialization

def head_to_bytes(head: FusionHead) -> bytes:
    u = np.ascontiguousarray(head.u, dtype="<f4")
    b = np.ascontiguousarray(head.b, dtype="<f4")
    return b"".join([
        FUSE_MAGIC,
        struct.pack("<II", len(head.layers), head.dim),
        struct.pack(f"<{len(head.layers)}I", *head.layers),
        u.tobytes(),
        b.tobytes(),
    ])


def head_from_bytes(blob: bytes) -> FusionHead:
    if len(blob) < 12 or blob[:4] != FUSE_MAGIC:
        raise ValueError("not a fusion head file (bad magic or truncated header)")
    n_layers, dim = struct.unpack_from("<II", blob, 4)
    off = 12
    want = off + 4 * n_layers + 4 * n_layers * dim + 4 * dim
    if len(blob) != want:
        raise ValueError(f"fusion head file is {len(blob)} bytes, layout implies {want}")
    layers = list(struct.unpack_from(f"<{n_layers}I", blob, off))
    off += 4 * n_layers
    u = np.frombuffer(blob, dtype="<f4", count=n_layers * dim, offset=off).reshape(n_layers, dim).copy()
    off += 4 * n_layers * dim
    b = np.frombuffer(blob, dtype="<f4", count=dim, offset=off).copy()
    return FusionHead(layers=layers, u=u, b=b)


def save_head(head: FusionHead, path) -> None:
    from pathlib import Path
    Path(path).write_bytes(head_to_bytes(head))


def load_head(path) -> FusionHead:
    from pathlib import Path
    return head_from_bytes(Path(path).read_bytes())
