"""Utility-adaptive sparse dimension masks.

Each candidate layer gets a binary mask over readout dimensions. A layer's
utility alpha is the min-max normalization of its standalone validation
nDCG@k across the candidate set; the retention ratio interpolates between
a floor rho and 1:

    P = alpha * (1 - rho) + rho

and the mask keeps the ceil(P * d) dimensions with the largest trained
|p|, ties resolved toward the lower index. Masks are frozen after this
stage; fusion never revisits them.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .diagnostics import LayerSelection
from .probes import ProbeParams, probe_forward
from .repr_store import LayerReadoutDataset
from .retrieval_eval import ndcg_at_k

STANDALONE_POOLS = ("layer", "anchor")


def standalone_layer_ndcg(ds: LayerReadoutDataset, layer: int, probe: ProbeParams,
                          k: int = 5, pool: str = "layer") -> float:
    """Mean nDCG@k of one probed layer retrieving its own pairs.

    Every probed text readout queries the candidate pool by cosine; the
    paired document is the only relevant one. With pool="layer" documents
    are the probed vision readouts of the same layer (self-contained
    utility); pool="anchor" scores against the raw final-layer vision
    anchors instead.
    """
    if pool not in STANDALONE_POOLS:
        raise ValueError(f"pool must be one of {STANDALONE_POOLS}, got {pool!r}")
    queries = probe_forward(probe, ds.text(layer))
    if pool == "layer":
        docs = probe_forward(probe, ds.vision(layer))
    else:
        docs = np.asarray(ds.anchors_vision(), dtype=np.float64)
    qn = np.linalg.norm(queries, axis=1)
    dn = np.linalg.norm(docs, axis=1)
    if np.any(qn == 0.0) or np.any(dn == 0.0):
        raise ValueError("zero-norm embedding: cosine ranking undefined")
    sims = (queries / qn[:, None]) @ (docs / dn[:, None]).T
    total = 0.0
    n = ds.n_pairs
    for i in range(n):
        # stable sort on negated scores: ties fall to the lower doc index
        order = np.argsort(-sims[i], kind="stable")
        ranking = [f"{j:09d}" for j in order[:k]]
        total += ndcg_at_k(ranking, {f"{i:09d}": 1}, k)
    return total / n


def layer_utilities(scores: Mapping[int, float]) -> dict[int, float]:
    """Min-max normalize standalone scores; all-equal collapses to 1."""
    if not scores:
        raise ValueError("no layer scores given")
    vals = np.array([scores[l] for l in scores], dtype=np.float64)
    lo, hi = float(vals.min()), float(vals.max())
    if hi == lo:
        return {l: 1.0 for l in scores}
    return {l: float((scores[l] - lo) / (hi - lo)) for l in scores}


def retention_ratios(alphas: Mapping[int, float], rho: float = 0.2) -> dict[int, float]:
    """P = alpha * (1 - rho) + rho, clamped nowhere: alphas are already [0, 1]."""
    if not (0.0 < rho <= 1.0):
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    for l, a in alphas.items():
        if not (0.0 <= a <= 1.0):
            raise ValueError(f"layer {l}: alpha {a} outside [0, 1]")
    return {l: a * (1.0 - rho) + rho for l, a in alphas.items()}


def build_mask(p: np.ndarray, ratio: float) -> np.ndarray:
    """Boolean mask keeping the ceil(ratio * d) largest-|p| dimensions.

    Ties rank the lower index first, so masks are deterministic and nest
    monotonically in the ratio.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    d = p.shape[0]
    if d == 0:
        raise ValueError("empty p")
    if not (0.0 < ratio <= 1.0):
        raise ValueError(f"retention ratio must lie in (0, 1], got {ratio}")
    count = min(d, math.ceil(ratio * d))
    order = np.argsort(-np.abs(p), kind="stable")
    mask = np.zeros(d, dtype=bool)
    mask[order[:count]] = True
    return mask


@dataclass
class MaskEntry:
    layer: int
    standalone_ndcg: float
    alpha: float
    p_ratio: float
    mask: np.ndarray  # (d,) bool


@dataclass
class MaskSet:
    rho: float
    k: int
    pool: str
    entries: dict[int, MaskEntry]

    @property
    def layers(self) -> list[int]:
        return list(self.entries)

    def mask_of(self, layer: int) -> np.ndarray:
        if layer not in self.entries:
            raise KeyError(f"no mask for layer {layer}")
        return self.entries[layer].mask


def build_mask_set(ds_val: LayerReadoutDataset, selection: LayerSelection,
                   probes: Mapping[int, ProbeParams], rho: float = 0.2,
                   k: int = 5, pool: str = "layer") -> MaskSet:
    """Score each candidate layer standalone on the validation split, convert
    scores to retention ratios, and cut each layer's mask from its |p|."""
    missing = [l for l in selection.s_cand if l not in probes]
    if missing:
        raise ValueError(f"no trained probe for layers {missing}")
    scores = {l: standalone_layer_ndcg(ds_val, l, probes[l], k=k, pool=pool)
              for l in selection.s_cand}
    alphas = layer_utilities(scores)
    ratios = retention_ratios(alphas, rho)
    entries = {}
    for l in selection.s_cand:
        entries[l] = MaskEntry(layer=l, standalone_ndcg=scores[l], alpha=alphas[l],
                               p_ratio=ratios[l], mask=build_mask(probes[l].p, ratios[l]))
    return MaskSet(rho=rho, k=k, pool=pool, entries=entries)


# ---------------------------------------------------------------------------
# persistence

def mask_set_to_json(ms: MaskSet) -> str:
    doc = {
        "rho": ms.rho,
        "k": ms.k,
        "pool": ms.pool,
        "layers": [
            {
                "layer": e.layer,
                "standalone_ndcg": e.standalone_ndcg,
                "alpha": e.alpha,
                "p_ratio": e.p_ratio,
                "mask": "".join("1" if b else "0" for b in e.mask),
            }
            for e in ms.entries.values()
        ],
    }
    return json.dumps(doc, indent=1)


def mask_set_from_json(text: str) -> MaskSet:
    doc = json.loads(text)
    entries = {}
    for row in doc["layers"]:
        bits = row["mask"]
        if set(bits) - {"0", "1"}:
            raise ValueError(f"layer {row['layer']}: mask string holds non-bit characters")
        entries[int(row["layer"])] = MaskEntry(
            layer=int(row["layer"]),
            standalone_ndcg=float(row["standalone_ndcg"]),
            alpha=float(row["alpha"]),
            p_ratio=float(row["p_ratio"]),
            mask=np.array([c == "1" for c in bits], dtype=bool),
        )
    return MaskSet(rho=float(doc["rho"]), k=int(doc["k"]), pool=str(doc["pool"]),
                   entries=entries)


def mask_set_to_csv(ms: MaskSet) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "standalone_ndcg", "alpha", "p_ratio", "retained_pct"])
    for e in ms.entries.values():
        retained = 100.0 * float(e.mask.sum()) / e.mask.shape[0]
        writer.writerow([e.layer, format(e.standalone_ndcg, ".12g"),
                         format(e.alpha, ".12g"), format(e.p_ratio, ".12g"),
                         format(retained, ".12g")])
    return buf.getvalue()
