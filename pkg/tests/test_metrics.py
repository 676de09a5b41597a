import math

import numpy as np
import pytest

from gatepilot.core import EmbeddingSet, Qrels, similarity
from gatepilot.metrics import (
    RetrievalRun,
    ScoredDoc,
    batch_instance_scores,
    evaluate_run,
    ndcg_at_k,
    per_instance_performance,
    top_k,
)


def corpus_from(vectors, ids=None):
    vectors = np.asarray(vectors, dtype=np.float32)
    if ids is None:
        ids = [f"d{i}" for i in range(len(vectors))]
    return EmbeddingSet(ids, vectors, provider="corpus")


def full_sort_oracle(query, corpus, k, metric):
    """Independent reference: score every doc, python-sort, truncate."""
    scored = [(doc_id, similarity(query, corpus.get(doc_id), metric)) for doc_id in corpus.ids]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return [doc_id for doc_id, _ in scored[:k]]


def ranking_of(doc_ids):
    return [ScoredDoc(doc_id=d, score=float(-i), rank=i + 1) for i, d in enumerate(doc_ids)]


class TestTopK:
    def test_orthogonal_separation(self):
        corpus = corpus_from([[1, 0], [0, 1]], ids=["d1", "d2"])
        hits = top_k(np.array([1.0, 0.0]), corpus, k=1, metric="ip")
        assert [(h.doc_id, h.score, h.rank) for h in hits] == [("d1", 1.0, 1)]

    def test_k_exceeds_corpus(self):
        corpus = corpus_from([[1, 0], [0, 1]], ids=["d1", "d2"])
        hits = top_k(np.array([1.0, 0.0]), corpus, k=5, metric="ip")
        assert [h.doc_id for h in hits] == ["d1", "d2"]
        assert [h.rank for h in hits] == [1, 2]

    def test_tie_break_by_doc_id(self):
        corpus = corpus_from([[1, 0], [1, 0], [1, 0]], ids=["z", "a", "m"])
        hits = top_k(np.array([1.0, 0.0]), corpus, k=3, metric="ip")
        assert [h.doc_id for h in hits] == ["a", "m", "z"]

    def test_matches_full_sort_oracle_seeded(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            n = int(rng.integers(1, 120))
            dim = int(rng.integers(2, 9))
            corpus = corpus_from(rng.normal(size=(n, dim)).astype(np.float32))
            query = rng.normal(size=dim).astype(np.float32)
            k = int(rng.integers(1, n + 4))
            metric = "ip" if rng.integers(2) else "cos"
            got = [h.doc_id for h in top_k(query, corpus, k, metric)]
            assert got == full_sort_oracle(query, corpus, k, metric)

    def test_k_validation(self):
        corpus = corpus_from([[1, 0]])
        with pytest.raises(ValueError, match="k must be"):
            top_k(np.array([1.0, 0.0]), corpus, k=0)

    def test_dim_mismatch(self):
        corpus = corpus_from([[1, 0]])
        with pytest.raises(ValueError, match="dim"):
            top_k(np.array([1.0, 0.0, 0.0]), corpus, k=1)


class TestNdcg:
    def test_relevant_at_rank_1(self):
        assert ndcg_at_k(ranking_of(["d1", "d2"]), {"d1": 1}) == 1.0

    def test_relevant_at_rank_2(self):
        # DCG = 1/log2(3), IDCG = 1
        expected = 1.0 / math.log2(3)
        assert ndcg_at_k(ranking_of(["x", "d1"]), {"d1": 1}) == pytest.approx(expected, abs=1e-12)

    def test_no_relevant_in_top_10(self):
        ranking = ranking_of([f"x{i}" for i in range(10)] + ["d1"])
        assert ndcg_at_k(ranking, {"d1": 1}) == 0.0

    def test_missing_judgments_score_zero(self):
        assert ndcg_at_k(ranking_of(["d1"]), None) == 0.0
        assert ndcg_at_k(ranking_of(["d1"]), {}) == 0.0

    def test_graded_gain(self):
        # rel 2 at rank 1, rel 1 at rank 2; ideal is the same arrangement
        ranking = ranking_of(["a", "b"])
        got = ndcg_at_k(ranking, {"a": 2, "b": 1})
        assert got == 1.0
        swapped = ndcg_at_k(ranking_of(["b", "a"]), {"a": 2, "b": 1})
        assert swapped < 1.0

    def test_bounded_and_monotone_under_upward_swap(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            n = int(rng.integers(2, 15))
            docs = [f"d{i}" for i in range(n)]
            rel_doc = docs[int(rng.integers(n))]
            base = ndcg_at_k(ranking_of(docs), {rel_doc: 1})
            assert 0.0 <= base <= 1.0
            pos = docs.index(rel_doc)
            if pos > 0:
                swapped = docs.copy()
                swapped[pos - 1], swapped[pos] = swapped[pos], swapped[pos - 1]
                assert ndcg_at_k(ranking_of(swapped), {rel_doc: 1}) >= base

    def test_invariant_to_doc_id_relabeling(self):
        rng = np.random.default_rng(5)
        docs = [f"d{i}" for i in range(12)]
        rels = {d: int(rng.integers(0, 3)) for d in docs[:6]}
        rels["d0"] = 1
        before = ndcg_at_k(ranking_of(docs), rels)
        mapping = {d: f"z{i}" for i, d in enumerate(docs)}
        after = ndcg_at_k(
            ranking_of([mapping[d] for d in docs]),
            {mapping[d]: r for d, r in rels.items()},
        )
        assert after == pytest.approx(before, abs=1e-15)


class TestPerInstance:
    def test_exact_match_scores_one(self):
        corpus = corpus_from([[1, 0], [0, 1]], ids=["rel", "other"])
        gate_embs = EmbeddingSet(["q1"], np.array([[1.0, 0.0]], dtype=np.float32))
        qrels = Qrels({"q1": {"rel": 1}})
        got = per_instance_performance("q1", "GA", gate_embs, corpus, qrels)
        assert got.score == 1.0 and got.gate == "GA"

    def test_relevant_outside_top_10_scores_zero(self):
        # 11 docs aligned with the query, the relevant one orthogonal
        vecs = [[1, 0]] * 11 + [[0, 1]]
        ids = [f"x{i:02d}" for i in range(11)] + ["rel"]
        corpus = corpus_from(vecs, ids=ids)
        gate_embs = EmbeddingSet(["q1"], np.array([[1.0, 0.0]], dtype=np.float32))
        qrels = Qrels({"q1": {"rel": 1}})
        assert per_instance_performance("q1", "GA", gate_embs, corpus, qrels).score == 0.0

    def test_missing_embedding_names_query(self):
        corpus = corpus_from([[1, 0]])
        gate_embs = EmbeddingSet(["q1"], np.array([[1.0, 0.0]], dtype=np.float32))
        qrels = Qrels({"q1": {"d0": 1}, "q9": {"d0": 1}})
        with pytest.raises(KeyError, match="q9"):
            batch_instance_scores(["q9"], gate_embs, corpus, qrels)

    def test_missing_qrels_names_query(self):
        corpus = corpus_from([[1, 0]])
        gate_embs = EmbeddingSet(["q1"], np.array([[1.0, 0.0]], dtype=np.float32))
        qrels = Qrels({"other": {"d0": 1}})
        with pytest.raises(KeyError, match="q1"):
            batch_instance_scores(["q1"], gate_embs, corpus, qrels)

    def test_batch_agrees_with_single(self):
        rng = np.random.default_rng(9)
        corpus = corpus_from(rng.normal(size=(40, 6)).astype(np.float32))
        qids = [f"q{i}" for i in range(8)]
        gate_embs = EmbeddingSet(qids, rng.normal(size=(8, 6)).astype(np.float32))
        qrels = Qrels({q: {f"d{int(rng.integers(40))}": 1} for q in qids})
        batch = batch_instance_scores(qids, gate_embs, corpus, qrels)
        for q in qids:
            single = per_instance_performance(q, "G", gate_embs, corpus, qrels).score
            assert batch[q] == single


class TestEvaluateRun:
    def test_arithmetic_mean(self):
        run = RetrievalRun({"q1": ranking_of(["rel1"]), "q2": ranking_of(["miss"])})
        qrels = Qrels({"q1": {"rel1": 1}, "q2": {"rel2": 1}})
        res = evaluate_run(run, qrels)
        assert res.mean == 0.5
        assert res.per_query == {"q1": 1.0, "q2": 0.0}

    def test_skips_unjudged_queries(self):
        run = RetrievalRun({"q1": ranking_of(["rel1"]), "zz": ranking_of(["a"])})
        qrels = Qrels({"q1": {"rel1": 1}})
        res = evaluate_run(run, qrels)
        assert res.mean == 1.0 and res.skipped == 1

    def test_empty_intersection_errors(self):
        run = RetrievalRun({"zz": ranking_of(["a"])})
        qrels = Qrels({"q1": {"rel1": 1}})
        with pytest.raises(ValueError, match="no overlap"):
            evaluate_run(run, qrels)

    def test_trec_round_trip_same_mean(self, tmp_path):
        rng = np.random.default_rng(17)
        corpus = corpus_from(rng.normal(size=(30, 5)).astype(np.float32))
        qids = [f"q{i}" for i in range(6)]
        embs = EmbeddingSet(qids, rng.normal(size=(6, 5)).astype(np.float32))
        qrels = Qrels({q: {f"d{int(rng.integers(30))}": 1} for q in qids})
        rankings = {q: top_k(embs.get(q), corpus, 10) for q in qids}
        run = RetrievalRun(rankings, tag="t1")
        path = tmp_path / "run.trec"
        run.save_trec(path)
        back = RetrievalRun.load_trec(path)
        assert evaluate_run(back, qrels).mean == pytest.approx(
            evaluate_run(run, qrels).mean, abs=1e-12
        )

    def test_run_validates_rank_order(self):
        with pytest.raises(ValueError, match="rank"):
            RetrievalRun({"q": [ScoredDoc("a", 1.0, 2)]})
        with pytest.raises(ValueError, match="duplicate doc"):
            RetrievalRun({"q": [ScoredDoc("a", 1.0, 1), ScoredDoc("a", 0.5, 2)]})
        with pytest.raises(ValueError, match="scores increase"):
            RetrievalRun({"q": [ScoredDoc("a", 0.5, 1), ScoredDoc("b", 1.0, 2)]})
