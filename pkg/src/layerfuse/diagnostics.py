"""Layerwise alignment diagnostics over a readout dataset.

For every stored layer l the report holds linear CKA against the
cross-modal anchors, the mean per-sample cosine to those anchors, the
alignment ratio ar = cos_mean / cka, min-max normalized versions of cka
and ar across layers, and the per-layer step of normalized ar. Candidate
selection thresholds normalized CKA and partitions the survivors into a
tail that keeps its coordinate system (base) and an earlier group that
gets a learned realignment (norm).
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .repr_store import LayerReadoutDataset

logger = logging.getLogger(__name__)


class DegenerateRepresentationError(ValueError):
    """A representation matrix has zero Frobenius norm (after centering)."""


class NoCandidatesError(ValueError):
    """No layer clears the CKA threshold."""


def linear_cka(x: np.ndarray, a: np.ndarray, center: bool = True) -> float:
    """Linear centered kernel alignment between (n, d) matrices x and a.

        cka = ||x^T a||_F^2 / (||x^T x||_F * ||a^T a||_F)

    Columns are mean-centered across samples unless center=False. The value
    lies in [0, 1] by Cauchy-Schwarz, is symmetric, and is invariant to
    isotropic scaling and to orthogonal right-multiplication of either
    argument. Accumulation is in float64 regardless of input dtype.
    """
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if x.ndim != 2 or a.ndim != 2 or x.shape != a.shape:
        raise ValueError(f"need matching 2-d matrices, got {x.shape} and {a.shape}")
    if x.shape[0] < 2:
        raise ValueError(f"need at least 2 samples, got {x.shape[0]}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(a))):
        raise ValueError("non-finite values in input")
    if center:
        x = x - x.mean(axis=0)
        a = a - a.mean(axis=0)
    num = np.linalg.norm(x.T @ a) ** 2
    den = np.linalg.norm(x.T @ x) * np.linalg.norm(a.T @ a)
    if den == 0.0:
        raise DegenerateRepresentationError(
            "zero-variance representation: ||x^T x||_F * ||a^T a||_F == 0")
    # Cauchy-Schwarz bounds the exact value by 1; shave float excess only.
    return min(float(num / den), 1.0)


def mean_cosine(x: np.ndarray, a: np.ndarray) -> float:
    """Mean per-row cosine similarity between matching rows of x and a."""
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if x.shape != a.shape or x.ndim != 2:
        raise ValueError(f"need matching 2-d matrices, got {x.shape} and {a.shape}")
    xn = np.linalg.norm(x, axis=1)
    an = np.linalg.norm(a, axis=1)
    if np.any(xn == 0.0) or np.any(an == 0.0):
        raise ValueError("zero-norm row: cosine undefined")
    return float(np.mean(np.sum(x * a, axis=1) / (xn * an)))


@dataclass
class LayerDiagnostics:
    layer: int
    cka: float
    cos_mean: float
    ar: Optional[float]                 # None where cka == 0
    cka_norm: float = 0.0
    ar_norm: Optional[float] = None
    delta_ar_norm: Optional[float] = None


@dataclass
class DiagnosticsReport:
    layers: list[int]                   # dataset storage order
    per_layer: dict[int, LayerDiagnostics]
    ar_step_layer: Optional[int] = None  # advisory: layer with the largest ar_norm step

    def row(self, layer: int) -> LayerDiagnostics:
        return self.per_layer[layer]


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.ones_like(values)
    return (values - lo) / (hi - lo)


def compute_report_from_arrays(layers: list[int],
                               text_by_layer: dict[int, np.ndarray],
                               vision_by_layer: dict[int, np.ndarray],
                               anchors_text: np.ndarray,
                               anchors_vision: np.ndarray,
                               center: bool = True) -> DiagnosticsReport:
    """Diagnostics over explicit per-layer readouts and cross-modal anchors.

    Each layer is scored on the stacked 2n comparison: text readouts against
    vision anchors on top of vision readouts against text anchors, so both
    directions contribute symmetrically.
    """
    anchor_stack = np.vstack([np.asarray(anchors_vision, dtype=np.float64),
                              np.asarray(anchors_text, dtype=np.float64)])
    rows: dict[int, LayerDiagnostics] = {}
    for layer in layers:
        x = np.vstack([np.asarray(text_by_layer[layer], dtype=np.float64),
                       np.asarray(vision_by_layer[layer], dtype=np.float64)])
        cka = linear_cka(x, anchor_stack, center=center)
        cos = mean_cosine(x, anchor_stack)
        ar = cos / cka if cka > 0.0 else None
        if ar is None:
            logger.warning("layer %d has zero CKA; alignment ratio undefined", layer)
        rows[layer] = LayerDiagnostics(layer=layer, cka=cka, cos_mean=cos, ar=ar)

    ckas = np.array([rows[l].cka for l in layers])
    if float(ckas.max()) == float(ckas.min()):
        logger.warning("CKA identical across all %d layers; normalized CKA set to 1", len(layers))
    cka_norm = _minmax(ckas)
    for l, v in zip(layers, cka_norm):
        rows[l].cka_norm = float(v)

    ar_layers = [l for l in layers if rows[l].ar is not None]
    if ar_layers:
        ar_norm = _minmax(np.array([rows[l].ar for l in ar_layers]))
        for l, v in zip(ar_layers, ar_norm):
            rows[l].ar_norm = float(v)
    step_layer, step_best = None, -np.inf
    for prev, cur in zip(layers, layers[1:]):
        a, b = rows[prev].ar_norm, rows[cur].ar_norm
        if a is None or b is None:
            continue
        rows[cur].delta_ar_norm = b - a
        if b - a > step_best:
            step_layer, step_best = cur, b - a
    return DiagnosticsReport(layers=list(layers), per_layer=rows, ar_step_layer=step_layer)


def compute_report(ds: LayerReadoutDataset, center: bool = True) -> DiagnosticsReport:
    """Diagnostics for every stored layer of a dataset against its anchors."""
    text = {l: ds.text(l) for l in ds.layers}
    vision = {l: ds.vision(l) for l in ds.layers}
    return compute_report_from_arrays(ds.layers, text, vision,
                                      ds.anchors_text(), ds.anchors_vision(),
                                      center=center)


@dataclass
class LayerSelection:
    tau_cka: float
    k_base: int
    s_cand: list[int]   # ascending layer indices
    s_base: list[int]   # last k_base of s_cand
    s_norm: list[int]   # the rest

    def kind_of(self, layer: int) -> str:
        if layer in self.s_base:
            return "base"
        if layer in self.s_norm:
            return "norm"
        raise KeyError(f"layer {layer} not selected")


def select_candidates(report: DiagnosticsReport, tau_cka: float = 0.6,
                      k_base: int = 3) -> LayerSelection:
    """Threshold normalized CKA at tau and split survivors into base/norm.

    The base group is the last min(k_base, |candidates|) layers by index;
    earlier survivors form the norm group and get a learned realignment.
    """
    if k_base < 1:
        raise ValueError(f"k_base must be >= 1, got {k_base}")
    s_cand = sorted(l for l in report.layers if report.row(l).cka_norm >= tau_cka)
    if not s_cand:
        raise NoCandidatesError(f"no layer reaches normalized CKA {tau_cka}")
    k = min(k_base, len(s_cand))
    return LayerSelection(tau_cka=tau_cka, k_base=k_base,
                          s_cand=s_cand, s_base=s_cand[-k:], s_norm=s_cand[:-k])


_CSV_COLUMNS = ("layer", "cka", "cka_norm", "cos_mean", "ar", "ar_norm", "delta_ar_norm")


def report_to_csv(report: DiagnosticsReport) -> str:
    """Render the per-layer table; undefined cells are left empty."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_CSV_COLUMNS)
    for layer in report.layers:
        r = report.row(layer)
        writer.writerow([
            layer,
            _fmt(r.cka), _fmt(r.cka_norm), _fmt(r.cos_mean),
            _fmt(r.ar), _fmt(r.ar_norm), _fmt(r.delta_ar_norm),
        ])
    return buf.getvalue()


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else format(v, ".12g")
