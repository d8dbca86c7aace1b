"""Retrieval eval: search oracles, nDCG, paired t-test, storage, formats."""

import math

import numpy as np
import pytest
import scipy.special

from layerfuse.retrieval_eval import (
    DenseIndex,
    MultiVectorIndex,
    TTestResult,
    betainc_regularized,
    dense_search,
    eff_report_csv,
    latency_bench,
    maxsim_score,
    maxsim_search,
    ndcg_at_k,
    paired_ttest,
    read_qrels,
    storage_bytes,
    storage_ratio,
    write_run,
)


def make_dense(rng, n_docs=200, dim=8):
    ids = [f"d{i:04d}" for i in range(n_docs)]
    return DenseIndex(doc_ids=ids,
                      vectors=rng.standard_normal((n_docs, dim)).astype(np.float32))


# ---------------------------------------------------------------------------
# dense search

def test_dense_search_matches_full_sort():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        index = make_dense(rng)
        q = rng.standard_normal(8)
        scores = index.vectors.astype(np.float64) @ np.asarray(q, dtype=np.float64)
        want = sorted(zip(index.doc_ids, scores), key=lambda t: (-t[1], t[0]))
        for k in (1, 7, 200, 500):
            got = dense_search(index, q, k)
            assert got == [(d, float(s)) for d, s in want[:k]]


def test_dense_search_breaks_ties_by_doc_id():
    v = np.ones((3, 2), dtype=np.float32)
    index = DenseIndex(doc_ids=["zeta", "alpha", "mid"], vectors=v)
    got = dense_search(index, np.array([1.0, 1.0]), 3)
    assert [d for d, _ in got] == ["alpha", "mid", "zeta"]


def test_dense_search_orthogonal_example():
    index = DenseIndex(doc_ids=["a", "b"],
                       vectors=np.eye(2, dtype=np.float32))
    got = dense_search(index, np.array([1.0, 0.0]), 2)
    assert got == [("a", 1.0), ("b", 0.0)]


def test_dense_search_single_doc():
    index = DenseIndex(doc_ids=["only"], vectors=np.array([[2.0, 0.5]], dtype=np.float32))
    assert dense_search(index, np.array([1.0, 2.0]), 5) == [("only", 3.0)]


def test_dense_search_validation():
    rng = np.random.default_rng(0)
    index = make_dense(rng, n_docs=4)
    with pytest.raises(ValueError):
        dense_search(index, np.zeros(8), 0)
    with pytest.raises(ValueError):
        dense_search(index, np.zeros(5), 3)
    with pytest.raises(ValueError):
        DenseIndex(doc_ids=["x", "x"], vectors=np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        DenseIndex(doc_ids=["x"], vectors=np.array([[np.nan, 0.0]], dtype=np.float32))
    with pytest.raises(ValueError):
        DenseIndex(doc_ids=["x", "y"], vectors=np.zeros((3, 2), dtype=np.float32))


# ---------------------------------------------------------------------------
# MaxSim

def test_maxsim_score_matches_loops():
    rng = np.random.default_rng(1)
    for _ in range(10):
        q = rng.standard_normal((3, 4))
        d = rng.standard_normal((5, 4))
        want = 0.0
        for i in range(3):
            want += max(float(q[i] @ d[j]) for j in range(5))
        assert maxsim_score(q, d) == pytest.approx(want, abs=1e-12)


def test_maxsim_single_tokens_is_dot():
    q = np.array([[1.0, 2.0, -0.5]])
    d = np.array([[4.0, 0.5, 2.0]])
    assert maxsim_score(q, d) == pytest.approx(4.0 + 1.0 - 1.0, abs=1e-12)


def test_maxsim_duplicate_doc_tokens_are_free():
    rng = np.random.default_rng(2)
    q = rng.standard_normal((3, 4))
    d = rng.standard_normal((5, 4))
    doubled = np.vstack([d, d])
    assert maxsim_score(q, doubled) == pytest.approx(maxsim_score(q, d), abs=1e-12)


def test_maxsim_monotone_in_doc_tokens():
    rng = np.random.default_rng(3)
    q = rng.standard_normal((4, 6))
    d = rng.standard_normal((3, 6))
    for _ in range(10):
        bigger = np.vstack([d, rng.standard_normal((1, 6))])
        assert maxsim_score(q, bigger) >= maxsim_score(q, d) - 1e-12
        d = bigger


def test_maxsim_search_matches_brute_force():
    rng = np.random.default_rng(4)
    ids = [f"d{i}" for i in range(20)]
    mats = [rng.standard_normal((int(rng.integers(1, 6)), 4)) for _ in ids]
    index = MultiVectorIndex(doc_ids=ids, token_mats=mats)
    q = rng.standard_normal((3, 4))
    scores = [maxsim_score(q, np.asarray(m, dtype=np.float32)) for m in mats]
    want = sorted(zip(ids, scores), key=lambda t: (-t[1], t[0]))[:5]
    assert maxsim_search(index, q, 5) == [(d, float(s)) for d, s in want]


def test_maxsim_validation():
    with pytest.raises(ValueError):
        maxsim_score(np.zeros((2, 3)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        maxsim_score(np.zeros((0, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        MultiVectorIndex(doc_ids=["a"], token_mats=[])
    with pytest.raises(ValueError):
        MultiVectorIndex(doc_ids=["a"], token_mats=[np.zeros((0, 3))])
    index = MultiVectorIndex(doc_ids=["a"], token_mats=[np.ones((1, 3))])
    with pytest.raises(ValueError):
        maxsim_search(index, np.ones((1, 3)), 0)


# ---------------------------------------------------------------------------
# nDCG

def brute_ndcg(ranking, rels, k, gain="exp"):
    g = (lambda r: 2.0 ** r - 1.0) if gain == "exp" else float
    dcg = sum(g(rels.get(doc, 0)) / math.log2(pos + 2)
              for pos, doc in enumerate(list(ranking)[:k]))
    ideal = sorted((g(r) for r in rels.values()), reverse=True)[:k]
    idcg = sum(v / math.log2(i + 2) for i, v in enumerate(ideal))
    return dcg / idcg if idcg > 0 else 0.0


def test_ndcg_matches_brute_force():
    rng = np.random.default_rng(5)
    docs = [f"d{i:02d}" for i in range(20)]
    for _ in range(300):
        ranked = list(rng.permutation(docs)[: int(rng.integers(1, 20))])
        rels = {d: int(rng.integers(0, 5)) for d in
                rng.permutation(docs)[: int(rng.integers(1, 20))]}
        k = int(rng.integers(1, 12))
        gain = ("exp", "linear")[int(rng.integers(0, 2))]
        got = ndcg_at_k(ranked, rels, k, gain=gain)
        assert abs(got - brute_ndcg(ranked, rels, k, gain)) <= 1e-12
        assert 0.0 <= got <= 1.0 + 1e-12


def test_ndcg_relevant_at_rank_two():
    got = ndcg_at_k(["miss", "hit"], {"hit": 1}, 5)
    assert got == pytest.approx(1.0 / math.log2(3.0), abs=1e-12)
    assert got == pytest.approx(0.63093, abs=1e-5)


def test_ndcg_perfect_and_empty():
    assert ndcg_at_k(["hit"], {"hit": 1}, 5) == 1.0
    assert ndcg_at_k(["a", "b"], {}, 5) == 0.0
    assert ndcg_at_k(["a", "b"], {"a": 0, "b": 0}, 5) == 0.0


def test_ndcg_ignores_tail_beyond_k():
    rels = {"a": 3, "b": 1}
    head = ["a", "b", "x"]
    assert ndcg_at_k(head + ["y", "z"], rels, 3) == \
           ndcg_at_k(head + ["z", "y"], rels, 3)


def test_ndcg_gain_modes_differ():
    # one high-grade doc behind a low-grade one: exp gains punish the swap more
    rels = {"lo": 1, "hi": 3}
    exp_v = ndcg_at_k(["lo", "hi"], rels, 2, gain="exp")
    lin_v = ndcg_at_k(["lo", "hi"], rels, 2, gain="linear")
    assert exp_v < lin_v
    brute_exp = (1.0 + 7.0 / math.log2(3)) / (7.0 + 1.0 / math.log2(3))
    assert exp_v == pytest.approx(brute_exp, abs=1e-12)


def test_ndcg_validation():
    with pytest.raises(ValueError):
        ndcg_at_k(["a"], {"a": 1}, 0)
    with pytest.raises(ValueError):
        ndcg_at_k(["a"], {"a": 1}, 3, gain="sqrt")
    with pytest.raises(ValueError):
        ndcg_at_k(["a"], {"a": -1}, 3)


# ---------------------------------------------------------------------------
# paired t-test

def test_ttest_frozen_example():
    res = paired_ttest([2.0, 3.0, 4.0], [1.0, 1.0, 1.0])  # diffs 1, 2, 3
    assert res.t == pytest.approx(2.0 * math.sqrt(3.0), abs=1e-12)
    assert res.t == pytest.approx(3.4641, abs=1e-4)
    assert res.p == pytest.approx(0.0742, abs=1e-3)
    assert res.dof == 2 and not res.t_infinite


def test_ttest_identical_scores():
    res = paired_ttest([0.5, 0.7, 0.9], [0.5, 0.7, 0.9])
    assert res.t == 0.0 and res.p == 1.0 and not res.t_infinite


def test_ttest_antisymmetric():
    rng = np.random.default_rng(6)
    a = rng.random(12)
    b = rng.random(12)
    fwd = paired_ttest(a, b)
    rev = paired_ttest(b, a)
    assert fwd.t == pytest.approx(-rev.t, abs=1e-12)
    assert fwd.p == pytest.approx(rev.p, abs=1e-12)


def test_ttest_constant_nonzero_difference():
    res = paired_ttest([1.0, 2.0, 3.0], [0.5, 1.5, 2.5])
    assert res.t_infinite
    assert math.isinf(res.t) and res.p == 0.0


def test_ttest_p_decreases_with_effect_size():
    base = np.linspace(0.0, 1.0, 10)
    noise = np.random.default_rng(7).normal(0.0, 0.05, 10)
    ps = []
    for shift in (0.01, 0.05, 0.2, 0.8):
        ps.append(paired_ttest(base + shift + noise, base).p)
    assert all(b <= a for a, b in zip(ps, ps[1:]))
    for p in ps:
        assert 0.0 < p <= 1.0


def test_ttest_validation():
    with pytest.raises(ValueError):
        paired_ttest([1.0], [2.0])
    with pytest.raises(ValueError):
        paired_ttest([1.0, 2.0], [1.0, 2.0, 3.0])


def test_betainc_against_scipy():
    grid = [0.001, 0.1, 0.25, 0.5, 0.75, 0.9, 0.999]
    for a in (0.5, 1.0, 2.5, 10.0, 40.0):
        for b in (0.5, 1.0, 3.0, 17.5):
            for x in grid:
                want = float(scipy.special.betainc(a, b, x))
                assert abs(betainc_regularized(a, b, x) - want) <= 1e-10
    assert betainc_regularized(2.0, 3.0, 0.0) == 0.0
    assert betainc_regularized(2.0, 3.0, 1.0) == 1.0


def test_betainc_symmetry_and_validation():
    for x in (0.2, 0.6):
        assert betainc_regularized(3.0, 5.0, x) == \
               pytest.approx(1.0 - betainc_regularized(5.0, 3.0, 1.0 - x), abs=1e-12)
    with pytest.raises(ValueError):
        betainc_regularized(0.0, 1.0, 0.5)
    with pytest.raises(ValueError):
        betainc_regularized(1.0, 1.0, 1.5)


# ---------------------------------------------------------------------------
# storage

def test_storage_minimal_dense():
    index = DenseIndex(doc_ids=["a"], vectors=np.zeros((1, 2), dtype=np.float32))
    assert storage_bytes(index) == 8


def test_storage_uniform_tokens_scale_exactly():
    rng = np.random.default_rng(8)
    n, d, t = 7, 6, 100
    dense = DenseIndex(doc_ids=[f"d{i}" for i in range(n)],
                       vectors=rng.standard_normal((n, d)).astype(np.float32))
    multi = MultiVectorIndex(doc_ids=[f"d{i}" for i in range(n)],
                             token_mats=[rng.standard_normal((t, d)).astype(np.float32)
                                         for _ in range(n)])
    assert storage_bytes(multi) == t * storage_bytes(dense)


def test_storage_ratio_example():
    assert storage_ratio(943.38, 22.24) == pytest.approx(42.4, abs=0.05)
    with pytest.raises(ValueError):
        storage_ratio(10.0, 0.0)


# ---------------------------------------------------------------------------
# latency bench

def test_latency_bench_dense_smoke():
    rng = np.random.default_rng(9)
    index = make_dense(rng, n_docs=50, dim=4)
    queries = [rng.standard_normal(4) for _ in range(3)]
    rep = latency_bench(index, queries, k=5, repetitions=2)
    assert rep.storage == storage_bytes(index)
    assert rep.n_queries == 3 and rep.repetitions == 2
    assert rep.mean_latency_s > 0 and rep.qps > 0
    assert rep.p50_latency_s > 0 and rep.p95_latency_s >= rep.p50_latency_s
    assert rep.embed_mean_s is None


def test_latency_bench_embed_and_multi():
    rng = np.random.default_rng(10)
    ids = [f"d{i}" for i in range(10)]
    index = MultiVectorIndex(
        doc_ids=ids,
        token_mats=[rng.standard_normal((4, 3)).astype(np.float32) for _ in ids])
    queries = [rng.standard_normal((2, 3)) for _ in range(2)]
    rep = latency_bench(index, queries, k=3, repetitions=1,
                        embed_fn=lambda q: q * 2.0)
    assert rep.embed_mean_s is not None and rep.embed_mean_s >= 0
    assert rep.qps > 0


def test_latency_bench_parallel_smoke():
    rng = np.random.default_rng(11)
    index = make_dense(rng, n_docs=20, dim=4)
    rep = latency_bench(index, [rng.standard_normal(4) for _ in range(4)],
                        k=2, repetitions=2, parallel=True)
    assert rep.mean_latency_s > 0
    assert rep.p50_latency_s == pytest.approx(rep.mean_latency_s)


def test_latency_bench_validation():
    rng = np.random.default_rng(12)
    index = make_dense(rng, n_docs=3, dim=4)
    with pytest.raises(ValueError):
        latency_bench(index, [], k=1)
    with pytest.raises(ValueError):
        latency_bench(index, [rng.standard_normal(4)], k=1, repetitions=0)


def test_eff_report_csv_format():
    rng = np.random.default_rng(13)
    index = make_dense(rng, n_docs=5, dim=4)
    rep = latency_bench(index, [rng.standard_normal(4)], k=1, repetitions=1)
    text = eff_report_csv({"dense": rep})
    lines = text.splitlines()
    assert lines[0].startswith("index,storage_bytes,n_queries")
    assert lines[1].startswith("dense,80,1,1,")
    assert lines[1].endswith(",")  # embed column empty without embed_fn


# ---------------------------------------------------------------------------
# qrels and run files

def test_read_qrels():
    text = "q1 0 docA 2\nq1 0 docB 0\n\nq2 0 docA 1\n"
    qrels = read_qrels(text)
    assert qrels == {"q1": {"docA": 2, "docB": 0}, "q2": {"docA": 1}}
    with pytest.raises(ValueError):
        read_qrels("q1 0 docA\n")
    with pytest.raises(ValueError):
        read_qrels("q1 0 docA -2\n")


def test_write_run_format():
    text = write_run({"q1": [("docB", 1.25), ("docA", 0.5)],
                      "q2": [("docC", -3.0)]}, tag="sys")
    assert text.splitlines() == [
        "q1 Q0 docB 1 1.25 sys",
        "q1 Q0 docA 2 0.5 sys",
        "q2 Q0 docC 1 -3 sys",
    ]
    assert write_run({}, tag="sys") == ""
