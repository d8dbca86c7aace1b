"""Retrieval metrics, significance testing, and efficiency harness.

Single-vector scoring is the exhaustive inner product; the multi-vector
reference scorer is late-interaction MaxSim. Quality is nDCG@k over
graded relevance, significance is a two-sided paired t-test, and the
efficiency report covers payload storage plus wall-clock search latency.
"""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

Qrels = dict[str, dict[str, int]]


# ---------------------------------------------------------------------------
# indexes and scoring

@dataclass
class DenseIndex:
    """One float32 vector per document; search is exhaustive."""

    doc_ids: list[str]
    vectors: np.ndarray  # (n_docs, dim) float32

    def __post_init__(self):
        if len(self.doc_ids) != len(set(self.doc_ids)):
            raise ValueError("duplicate doc ids")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.doc_ids):
            raise ValueError(f"vectors shaped {self.vectors.shape} for {len(self.doc_ids)} docs")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("non-finite vector entries")
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class MultiVectorIndex:
    """One (tokens, dim) float32 matrix per document, for MaxSim scoring."""

    doc_ids: list[str]
    token_mats: list[np.ndarray]

    def __post_init__(self):
        if len(self.doc_ids) != len(set(self.doc_ids)):
            raise ValueError("duplicate doc ids")
        if len(self.token_mats) != len(self.doc_ids):
            raise ValueError("one token matrix per doc id required")
        self.token_mats = [np.ascontiguousarray(m, dtype=np.float32) for m in self.token_mats]
        for m in self.token_mats:
            if m.ndim != 2 or m.shape[0] == 0 or not np.all(np.isfinite(m)):
                raise ValueError("token matrices must be non-empty, finite, 2-d")


def dense_search(index: DenseIndex, query: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Top-k documents by inner product; ties broken by ascending doc id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise ValueError(f"query dim {q.shape[0]} != index dim {index.dim}")
    scores = index.vectors.astype(np.float64) @ q
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], index.doc_ids[i]))
    return [(index.doc_ids[i], float(scores[i])) for i in order[:k]]


def maxsim_score(query_tokens: np.ndarray, doc_tokens: np.ndarray) -> float:
    """Late-interaction score: sum over query tokens of the best doc-token dot."""
    q = np.asarray(query_tokens, dtype=np.float64)
    d = np.asarray(doc_tokens, dtype=np.float64)
    if q.ndim != 2 or d.ndim != 2 or q.shape[1] != d.shape[1]:
        raise ValueError(f"token matrices {q.shape} and {d.shape} do not align")
    if q.shape[0] == 0 or d.shape[0] == 0:
        raise ValueError("empty token matrix")
    return float(np.max(q @ d.T, axis=1).sum())


def maxsim_search(index: MultiVectorIndex, query_tokens: np.ndarray, k: int,
                  ) -> list[tuple[str, float]]:
    """Exhaustive MaxSim ranking with the same tie rule as dense_search."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = [maxsim_score(query_tokens, m) for m in index.token_mats]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], index.doc_ids[i]))
    return [(index.doc_ids[i], float(scores[i])) for i in order[:k]]


# ---------------------------------------------------------------------------
# quality metrics

def ndcg_at_k(ranking: Sequence[str], rels: Mapping[str, int], k: int,
              gain: str = "exp") -> float:
    """nDCG@k with gains 2^rel - 1 (or rel when gain="linear") and log2 discounts.

    The ideal ranking sorts the full relevance set, not just retrieved docs.
    Queries whose ideal DCG is zero score zero.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if gain not in ("exp", "linear"):
        raise ValueError(f"gain must be 'exp' or 'linear', got {gain!r}")
    if any(r < 0 for r in rels.values()):
        raise ValueError("negative relevance grade")

    def g(rel: int) -> float:
        return float(2 ** rel - 1) if gain == "exp" else float(rel)

    dcg = 0.0
    for i, doc in enumerate(ranking[:k]):
        dcg += g(rels.get(doc, 0)) / math.log2(i + 2)
    ideal = sorted(rels.values(), reverse=True)[:k]
    idcg = sum(g(rel) / math.log2(i + 2) for i, rel in enumerate(ideal))
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


# ---------------------------------------------------------------------------
# paired significance test

@dataclass
class TTestResult:
    """Two-sided paired t-test. When the differences have zero variance but a
    nonzero mean, the statistic is unbounded: `t_infinite` flags that case and
    reports must render the flag, never a bare non-finite float."""

    t: float
    p: float
    dof: int
    t_infinite: bool = False


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test of per-query scores a against b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"need matching 1-d score arrays, got {a.shape} and {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 paired scores, got {n}")
    d = a - b
    dof = n - 1
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, p=1.0, dof=dof)
        return TTestResult(t=math.inf, p=0.0, dof=dof, t_infinite=True)
    t = mean / (sd / math.sqrt(n))
    p = betainc_regularized(dof / 2.0, 0.5, dof / (dof + t * t))
    return TTestResult(t=t, p=min(max(p, 0.0), 1.0), dof=dof)


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) by continued fraction.

    Uses the symmetry I_x(a,b) = 1 - I_{1-x}(b,a) to keep the continued
    fraction in its fast-converging region.
    """
    if a <= 0.0 or b <= 0.0:
        raise ValueError("a and b must be positive")
    if not (0.0 <= x <= 1.0):
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def _beta_cf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 3e-16) -> float:
    # Lentz's algorithm for the incomplete-beta continued fraction.
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise RuntimeError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


# ---------------------------------------------------------------------------
# efficiency

def storage_bytes(index: DenseIndex | MultiVectorIndex) -> int:
    """Payload bytes only: vector data at 4 bytes per float, no metadata."""
    if isinstance(index, DenseIndex):
        return int(index.vectors.shape[0]) * int(index.vectors.shape[1]) * 4
    return sum(int(m.shape[0]) * int(m.shape[1]) * 4 for m in index.token_mats)


def storage_ratio(larger_bytes: float, smaller_bytes: float) -> float:
    if smaller_bytes <= 0:
        raise ValueError("storage ratio needs a positive denominator")
    return float(larger_bytes) / float(smaller_bytes)


@dataclass
class EffReport:
    storage: int
    n_queries: int
    repetitions: int
    mean_latency_s: float
    p50_latency_s: float
    p95_latency_s: float
    qps: float
    embed_mean_s: Optional[float] = None


def latency_bench(index: DenseIndex | MultiVectorIndex,
                  queries: Sequence[np.ndarray],
                  k: int = 10,
                  repetitions: int = 3,
                  parallel: bool = False,
                  embed_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                  ) -> EffReport:
    """Wall-clock search benchmark over a fixed query order.

    One untimed warmup pass precedes measurement. When `embed_fn` is given,
    queries are raw inputs: embedding runs first and is timed separately, so
    the search numbers isolate index traversal from representation cost.
    Absolute numbers are machine-dependent; only relative comparisons on the
    same host are meaningful.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if len(queries) == 0:
        raise ValueError("no queries given")
    embed_mean = None
    if embed_fn is not None:
        t0 = time.perf_counter()
        queries = [embed_fn(q) for q in queries]
        embed_mean = (time.perf_counter() - t0) / len(queries)

    search: Callable[[np.ndarray], object]
    if isinstance(index, DenseIndex):
        search = lambda q: dense_search(index, q, k)  # noqa: E731
    else:
        search = lambda q: maxsim_search(index, q, k)  # noqa: E731

    def one_pass() -> list[float]:
        times = []
        for q in queries:
            t0 = time.perf_counter()
            search(q)
            times.append(time.perf_counter() - t0)
        return times

    if parallel:
        with ThreadPoolExecutor() as pool:
            list(pool.map(search, queries))  # warmup
            per_query: list[float] = []
            wall = 0.0
            for _ in range(repetitions):
                t0 = time.perf_counter()
                list(pool.map(search, queries))
                wall += time.perf_counter() - t0
            per_query = [wall / (repetitions * len(queries))] * len(queries)
            mean = per_query[0]
            lat = np.asarray(per_query)
    else:
        one_pass()  # warmup
        runs = [one_pass() for _ in range(repetitions)]
        lat = np.asarray(runs).mean(axis=0)
        mean = float(lat.mean())
    return EffReport(
        storage=storage_bytes(index),
        n_queries=len(queries),
        repetitions=repetitions,
        mean_latency_s=mean,
        p50_latency_s=float(np.percentile(lat, 50)),
        p95_latency_s=float(np.percentile(lat, 95)),
        qps=(1.0 / mean) if mean > 0 else math.inf,
        embed_mean_s=embed_mean,
    )


def eff_report_csv(rows: Mapping[str, EffReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "storage_bytes", "n_queries", "repetitions",
                     "mean_latency_s", "p50_latency_s", "p95_latency_s", "qps",
                     "embed_mean_s"])
    for name, r in rows.items():
        writer.writerow([name, r.storage, r.n_queries, r.repetitions,
                         format(r.mean_latency_s, ".6g"), format(r.p50_latency_s, ".6g"),
                         format(r.p95_latency_s, ".6g"), format(r.qps, ".6g"),
                         "" if r.embed_mean_s is None else format(r.embed_mean_s, ".6g")])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# qrels and run files

def read_qrels(text: str) -> Qrels:
    """Parse 'query_id 0 doc_id grade' lines into per-query grade maps."""
    qrels: Qrels = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"qrels line {lineno}: want 4 columns, got {len(parts)}")
        qid, _, did, grade = parts
        g = int(grade)
        if g < 0:
            raise ValueError(f"qrels line {lineno}: negative grade {g}")
        qrels.setdefault(qid, {})[did] = g
    return qrels


def write_run(rankings: Mapping[str, Sequence[tuple[str, float]]], tag: str) -> str:
    """Render ranked lists as 'query_id Q0 doc_id rank score tag' lines."""
    lines = []
    for qid in rankings:
        for rank, (did, score) in enumerate(rankings[qid], 1):
            lines.append(f"{qid} Q0 {did} {rank} {format(score, '.6g')} {tag}")
    return "\n".join(lines) + ("\n" if lines else "")
