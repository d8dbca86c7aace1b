"""Retrieval-aligned probes and their contrastive training loop.

Two probe families map a layer readout x (dim d) toward the anchor space:

    base probe   q = p * x                  (elementwise reweight)
    norm probe   q = W_hat (p * x)          (reweight + learned realignment)

where p is a d-vector and W_hat is W with every row scaled to unit l2
norm; the raw W is the trainable quantity and gradients flow through the
normalization. Training minimizes a siamese InfoNCE objective over paired
readouts: for a batch of pairs, each probed text readout is pulled to its
vision anchor against in-batch (plus declared hard) negatives, the probed
vision readout symmetrically to its text anchor, and an l1 penalty on p
encourages concentration:

    L = mean_i [ l(probe(x_t_i), a_v_i) + l(probe(x_v_i), a_t_i) ] / 2
        + l1_lambda * ||p||_1

with cosine-similarity logits at a fixed temperature. All gradients here
are analytic (no autograd); the test suite checks them against central
finite differences. The optimizer is Adam with decoupled weight decay:
decay multiplies the realignment weights (never p, never a bias) by
(1 - lr * wd) before the moment update. Everything accumulates in
float64; serialized parameters are float32.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .repr_store import LayerReadoutDataset

PROBE_MAGIC = b"MPR1"
_KIND_CODES = {"base": 0, "norm": 1}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


class DegenerateProjectionError(ValueError):
    """A realignment row has zero norm; its direction is undefined."""


@dataclass
class ProbeParams:
    layer: int
    kind: str                      # "base" | "norm"
    p: np.ndarray                  # (d,)
    w: Optional[np.ndarray] = None  # (d, d) raw realignment, norm kind only

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown probe kind {self.kind!r}")
        if self.kind == "norm" and self.w is None:
            raise ValueError("norm probe needs a realignment matrix")
        if self.kind == "base" and self.w is not None:
            raise ValueError("base probe must not carry a realignment matrix")


@dataclass(frozen=True)
class TrainConfig:
    """Shared optimization schema for probe and fusion training.

    Defaults are the probe-stage settings: lr 2e-4, batch 1024 (clamped to
    the dataset when smaller), 40 epochs with a one-epoch linear warmup
    then constant lr, decoupled weight decay 0.01 on realignment weights,
    l1 3e-4 on p, temperature 0.05, seed 42.
    """

    learning_rate: float = 2e-4
    batch_size: int = 1024
    epochs: int = 40
    warmup: float = 1.0 / 40.0     # fraction of total steps ramped linearly
    weight_decay: float = 0.01
    l1_lambda: float = 3e-4
    temperature: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 42

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if not (0.0 <= self.warmup <= 1.0):
            raise ValueError("warmup fraction must lie in [0, 1]")
        if self.epochs < 1 or self.learning_rate <= 0:
            raise ValueError("need epochs >= 1 and a positive learning rate")


# ---------------------------------------------------------------------------
# forwards

def normalize_rows(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    norms = np.linalg.norm(w, axis=1)
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise DegenerateProjectionError(f"realignment row {bad} has zero norm")
    return w / norms[:, None]


def probe_forward(params: ProbeParams, x: np.ndarray) -> np.ndarray:
    """Apply a probe to readouts x of shape (..., d)."""
    x = np.asarray(x, dtype=np.float64)
    p = np.asarray(params.p, dtype=np.float64)
    if x.shape[-1] != p.shape[0]:
        raise ValueError(f"readout dim {x.shape[-1]} != probe dim {p.shape[0]}")
    y = x * p
    if params.kind == "base":
        return y
    return y @ normalize_rows(params.w).T


# ---------------------------------------------------------------------------
# InfoNCE

def infonce(query: np.ndarray, positive: np.ndarray,
            negatives: Sequence[np.ndarray] | np.ndarray,
            temperature: float = 0.05) -> float:
    """Single-query InfoNCE with cosine logits.

    Reference scalar form used by tests and reports; batched training goes
    through the vectorized internals. Zero negatives give loss 0. The value
    is always >= 0 and equals log(k) when all k candidates tie the positive.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    cands = [np.asarray(positive, dtype=np.float64).reshape(-1)]
    cands.extend(np.asarray(n, dtype=np.float64).reshape(-1) for n in negatives)
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise ValueError("zero-norm query")
    logits = []
    for c in cands:
        cn = np.linalg.norm(c)
        if cn == 0.0:
            raise ValueError("zero-norm candidate")
        logits.append(float(q @ c) / (qn * cn * temperature))
    m = max(logits)
    lse = m + math.log(sum(math.exp(s - m) for s in logits))
    return lse - logits[0]


@dataclass
class SiameseBatch:
    """One training batch: probed inputs plus anchor candidates.

    Row i of every array belongs to the same pair. `extra_*` hold anchors of
    hard-negative pairs outside the batch; `extra_active[i, e]` marks which
    of them are negatives for row i (the same pair list serves both loss
    directions).
    """

    xt: np.ndarray          # (b, d) text readouts at the probed layer
    xv: np.ndarray          # (b, d) vision readouts
    at: np.ndarray          # (b, d) text anchors
    av: np.ndarray          # (b, d) vision anchors
    extra_at: np.ndarray    # (e, d)
    extra_av: np.ndarray    # (e, d)
    extra_active: np.ndarray  # (b, e) bool

    @property
    def size(self) -> int:
        return self.xt.shape[0]


def make_batch(indices: np.ndarray,
               xt: np.ndarray, xv: np.ndarray,
               at: np.ndarray, av: np.ndarray,
               hard_negatives: Optional[list[list[int]]]) -> SiameseBatch:
    """Slice a batch out of full (n, d) arrays and gather out-of-batch
    hard-negative anchors."""
    idx = np.asarray(indices)
    if idx.shape[0] < 2:
        raise ValueError("siamese batches need at least 2 pairs")
    in_batch = {int(i): pos for pos, i in enumerate(idx)}
    extra_ids: list[int] = []
    extra_pos: dict[int, int] = {}
    rows_cols: list[tuple[int, int]] = []
    if hard_negatives is not None:
        for row, i in enumerate(idx):
            for j in hard_negatives[int(i)]:
                if j in in_batch:
                    continue  # already an in-batch negative
                if j not in extra_pos:
                    extra_pos[j] = len(extra_ids)
                    extra_ids.append(j)
                rows_cols.append((row, extra_pos[j]))
    d = xt.shape[1]
    active = np.zeros((idx.shape[0], len(extra_ids)), dtype=bool)
    for r, c in rows_cols:
        active[r, c] = True
    extra = np.asarray(extra_ids, dtype=int)
    return SiameseBatch(
        xt=xt[idx], xv=xv[idx], at=at[idx], av=av[idx],
        extra_at=at[extra] if extra.size else np.zeros((0, d)),
        extra_av=av[extra] if extra.size else np.zeros((0, d)),
        extra_active=active,
    )


def _unit_rows(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0.0):
        raise ValueError(f"zero-norm {what} row: cosine undefined")
    return m / norms[:, None], norms


def _nce_rows(q: np.ndarray, cands: np.ndarray,
              extra: np.ndarray, extra_active: np.ndarray,
              temperature: float, candidate_grads: bool,
              ) -> tuple[float, np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]:
    """Batched InfoNCE: row i of `q` scores all rows of `cands` (column i is
    its positive) plus its active `extra` columns. Returns the mean loss, the
    gradient w.r.t. q, and — when candidate_grads — gradients w.r.t. cands
    and extra."""
    b = q.shape[0]
    qh, qn = _unit_rows(q, "query")
    ch, cn = _unit_rows(cands, "candidate")
    cos_in = qh @ ch.T                                   # (b, b)
    if extra.shape[0]:
        eh, en = _unit_rows(extra, "candidate")
        cos_ex = qh @ eh.T                               # (b, e)
        logits_ex = np.where(extra_active, cos_ex / temperature, -np.inf)
    else:
        eh = en = None
        cos_ex = np.zeros((b, 0))
        logits_ex = np.zeros((b, 0))
    logits = np.concatenate([cos_in / temperature, logits_ex], axis=1)
    m = logits.max(axis=1, keepdims=True)
    z = np.exp(logits - m)
    denom = z.sum(axis=1)
    lse = m[:, 0] + np.log(denom)
    pos = np.diag(cos_in) / temperature
    loss = float(np.mean(lse - pos))

    soft = z / denom[:, None]
    dlogits = soft / b
    dlogits[np.arange(b), np.arange(b)] -= 1.0 / b
    dcos = dlogits / temperature
    g_in, g_ex = dcos[:, :b], dcos[:, b:]

    # d cos(q, c) / dq = (c_hat - cos * q_hat) / ||q||
    row_in = np.sum(g_in * cos_in, axis=1)
    dq = g_in @ ch
    if extra.shape[0]:
        row_ex = np.sum(g_ex * cos_ex, axis=1)
        dq += g_ex @ eh
        dq -= (row_in + row_ex)[:, None] * qh
    else:
        dq -= row_in[:, None] * qh
    dq /= qn[:, None]

    if not candidate_grads:
        return loss, dq, None, None
    col_in = np.sum(g_in * cos_in, axis=0)
    dc = (g_in.T @ qh - col_in[:, None] * ch) / cn[:, None]
    dextra = None
    if extra.shape[0]:
        col_ex = np.sum(g_ex * cos_ex, axis=0)
        dextra = (g_ex.T @ qh - col_ex[:, None] * eh) / en[:, None]
    return loss, dq, dc, dextra


def probe_loss(params: ProbeParams, batch: SiameseBatch, config: TrainConfig) -> float:
    """Siamese objective value for one batch, including the l1 term."""
    loss, _ = _probe_loss_grad(params, batch, config, want_grad=False)
    return loss


def probe_grad(params: ProbeParams, batch: SiameseBatch, config: TrainConfig,
               ) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and analytic gradients w.r.t. p (and w for norm probes)."""
    return _probe_loss_grad(params, batch, config, want_grad=True)


def _probe_loss_grad(params: ProbeParams, batch: SiameseBatch, config: TrainConfig,
                     want_grad: bool) -> tuple[float, dict[str, np.ndarray]]:
    if batch.size < 2:
        raise ValueError("siamese batches need at least 2 pairs")
    p = np.asarray(params.p, dtype=np.float64)
    xt = np.asarray(batch.xt, dtype=np.float64)
    xv = np.asarray(batch.xv, dtype=np.float64)
    yt, yv = xt * p, xv * p
    if params.kind == "norm":
        w = np.asarray(params.w, dtype=np.float64)
        norms = np.linalg.norm(w, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateProjectionError("realignment row with zero norm")
        w_hat = w / norms[:, None]
        qt, qv = yt @ w_hat.T, yv @ w_hat.T
    else:
        w = w_hat = norms = None
        qt, qv = yt, yv

    loss_t, dqt, _, _ = _nce_rows(qt, batch.av, batch.extra_av, batch.extra_active,
                                  config.temperature, candidate_grads=False)
    loss_v, dqv, _, _ = _nce_rows(qv, batch.at, batch.extra_at, batch.extra_active,
                                  config.temperature, candidate_grads=False)
    loss = 0.5 * (loss_t + loss_v) + config.l1_lambda * float(np.abs(p).sum())
    if not want_grad:
        return loss, {}

    dqt, dqv = 0.5 * dqt, 0.5 * dqv
    grads: dict[str, np.ndarray] = {}
    if params.kind == "base":
        grads["p"] = np.sum(dqt * xt + dqv * xv, axis=0)
    else:
        dyt, dyv = dqt @ w_hat, dqv @ w_hat
        grads["p"] = np.sum(dyt * xt + dyv * xv, axis=0)
        # d q_j / d w_j = (y - q_j w_hat_j) / ||w_j||, accumulated over batch
        a = dqt.T @ yt + dqv.T @ yv
        c = np.sum(dqt * qt, axis=0) + np.sum(dqv * qv, axis=0)
        grads["w"] = (a - c[:, None] * w_hat) / norms[:, None]
    # l1 subgradient, defined as 0 at p_i == 0
    grads["p"] = grads["p"] + config.l1_lambda * np.sign(p)
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer and schedule

class AdamW:
    """Adam with decoupled weight decay over a named parameter dict.

    Parameters named in `decay` are multiplied by (1 - lr * wd) before each
    moment update; others (the sparse gate p, fusion bias) see no decay.
    """

    def __init__(self, values: Mapping[str, np.ndarray], config: TrainConfig,
                 decay: Sequence[str] = ()):
        self.config = config
        self.decay = frozenset(decay)
        unknown = self.decay - set(values)
        if unknown:
            raise ValueError(f"decay names {sorted(unknown)} not among parameters")
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in values.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in values.items()}
        self.t = 0

    def step(self, values: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
             lr: float) -> None:
        cfg = self.config
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, g in grads.items():
            if name in self.decay:
                values[name] *= 1.0 - lr * cfg.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * np.square(g)
            values[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Learning rate for 1-based `step`: linear ramp over the warmup window,
    constant afterwards."""
    warmup_steps = int(round(config.warmup * total_steps))
    if warmup_steps > 0 and step <= warmup_steps:
        return config.learning_rate * step / warmup_steps
    return config.learning_rate


# ---------------------------------------------------------------------------
# training loop

@dataclass
class ProbeTrainResult:
    params: dict[int, ProbeParams]
    trace: list[tuple[int, int, float]]   # (epoch, layer, mean batch loss)


def _batch_plan(n: int, batch_size: int) -> list[tuple[int, int]]:
    size = min(batch_size, n)
    spans = [(s, min(s + size, n)) for s in range(0, n, size)]
    return [(a, b) for a, b in spans if b - a >= 2]


def train_probes(ds: LayerReadoutDataset, kinds: Mapping[int, str],
                 config: TrainConfig = TrainConfig()) -> ProbeTrainResult:
    """Train one probe per requested layer, all sharing each epoch's batches.

    Layers are independent: each keeps its own parameters and optimizer
    state, so jointly trained probes match individually trained ones at a
    fixed seed. Deterministic for a fixed config.
    """
    if not kinds:
        raise ValueError("no layers requested")
    for layer, kind in kinds.items():
        if kind not in _KIND_CODES:
            raise ValueError(f"layer {layer}: unknown probe kind {kind!r}")
        ds.layer_pos(layer)  # raises on unknown layer
    n, d = ds.n_pairs, ds.dim
    at = ds.anchors_text().astype(np.float64)
    av = ds.anchors_vision().astype(np.float64)
    xs = {l: (ds.text(l).astype(np.float64), ds.vision(l).astype(np.float64))
          for l in kinds}

    values: dict[int, dict[str, np.ndarray]] = {}
    opts: dict[int, AdamW] = {}
    for layer, kind in kinds.items():
        # Identity start: the probe initially reproduces the raw readout.
        v = {"p": np.ones(d)}
        if kind == "norm":
            v["w"] = np.eye(d)
        values[layer] = v
        opts[layer] = AdamW(v, config, decay=("w",) if kind == "norm" else ())

    plan = _batch_plan(n, config.batch_size)
    if not plan:
        raise ValueError(f"dataset of {n} pairs yields no usable batch")
    total_steps = config.epochs * len(plan)
    rng = np.random.default_rng(config.seed)
    trace: list[tuple[int, int, float]] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        sums = {l: 0.0 for l in kinds}
        for a, b in plan:
            step += 1
            lr = lr_at(step, total_steps, config)
            batch_by_layer = {}
            for layer in kinds:
                xt, xv = xs[layer]
                batch_by_layer[layer] = make_batch(order[a:b], xt, xv, at, av,
                                                   ds.hard_negatives)
            for layer, kind in kinds.items():
                params = ProbeParams(layer=layer, kind=kind,
                                     p=values[layer]["p"],
                                     w=values[layer].get("w"))
                loss, grads = probe_grad(params, batch_by_layer[layer], config)
                opts[layer].step(values[layer], grads, lr)
                sums[layer] += loss
        for layer in kinds:
            trace.append((epoch, layer, sums[layer] / len(plan)))

    out = {}
    for layer, kind in kinds.items():
        out[layer] = ProbeParams(
            layer=layer, kind=kind,
            p=values[layer]["p"].astype(np.float32),
            w=values[layer]["w"].astype(np.float32) if kind == "norm" else None,
        )
    return ProbeTrainResult(params=out, trace=trace)


def train_probe(ds: LayerReadoutDataset, layer: int, kind: str,
                config: TrainConfig = TrainConfig()) -> ProbeParams:
    """Train a single layer's probe. Equivalent to the joint loop on one layer."""
    return train_probes(ds, {layer: kind}, config).params[layer]


# ---------------------------------------------------------------------------
# serialization

def probe_to_bytes(params: ProbeParams) -> bytes:
    p = np.ascontiguousarray(params.p, dtype="<f4")
    parts = [PROBE_MAGIC,
             struct.pack("<IBI", params.layer, _KIND_CODES[params.kind], p.shape[0]),
             p.tobytes()]
    if params.kind == "norm":
        w = np.ascontiguousarray(params.w, dtype="<f4")
        if w.shape != (p.shape[0], p.shape[0]):
            raise ValueError(f"realignment shaped {w.shape}, want square of dim {p.shape[0]}")
        parts.append(w.tobytes())
    return b"".join(parts)


def probe_from_bytes(blob: bytes) -> ProbeParams:
    head = struct.Struct("<IBI")
    if len(blob) < 4 + head.size or blob[:4] != PROBE_MAGIC:
        raise ValueError("not a probe file (bad magic or truncated header)")
    layer, kind_code, dim = head.unpack_from(blob, 4)
    if kind_code not in _CODE_KINDS:
        raise ValueError(f"unknown probe kind code {kind_code}")
    kind = _CODE_KINDS[kind_code]
    off = 4 + head.size
    want = off + 4 * dim + (4 * dim * dim if kind == "norm" else 0)
    if len(blob) != want:
        raise ValueError(f"probe file is {len(blob)} bytes, layout implies {want}")
    p = np.frombuffer(blob, dtype="<f4", count=dim, offset=off).copy()
    w = None
    if kind == "norm":
        w = np.frombuffer(blob, dtype="<f4", count=dim * dim,
                          offset=off + 4 * dim).reshape(dim, dim).copy()
    return ProbeParams(layer=layer, kind=kind, p=p, w=w)


def save_probe(params: ProbeParams, path) -> None:
    from pathlib import Path
    Path(path).write_bytes(probe_to_bytes(params))


def load_probe(path) -> ProbeParams:
    from pathlib import Path
    return probe_from_bytes(Path(path).read_bytes())
