"""Brute-force top-k retrieval, nDCG@10, and per-instance gate performance.

Rankings are exact: scores for every corpus document, sorted descending with
ties broken by ascending doc_id, so runs are reproducible across platforms.
The per-instance performance of a gate on a query is the nDCG@10 of
retrieving with that gate's query embedding against the shared corpus; this
single number is what both the gate-assignment step and the instance-level
oracle consume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from gatepilot.core import DataFormatError, EmbeddingSet, Embedding, Qrels, check_metric

DEFAULT_K = 10


@dataclass(frozen=True)
class ScoredDoc:
    doc_id: str
    score: float
    rank: int  # 1-based


@dataclass(frozen=True)
class PerInstanceScore:
    query_id: str
    gate: str
    score: float


class RetrievalRun:
    """Ranked scored document lists per query; TREC-serializable."""

    def __init__(self, rankings: Mapping[str, Sequence[ScoredDoc]], tag: str = "run"):
        clean: dict[str, tuple[ScoredDoc, ...]] = {}
        for qid, docs in rankings.items():
            docs = tuple(docs)
            seen = set()
            for pos, doc in enumerate(docs, start=1):
                if doc.doc_id in seen:
                    raise ValueError(f"run {tag!r}, query {qid!r}: duplicate doc {doc.doc_id!r}")
                seen.add(doc.doc_id)
                if doc.rank != pos:
                    raise ValueError(
                        f"run {tag!r}, query {qid!r}: rank {doc.rank} at position {pos}"
                    )
                if pos > 1 and doc.score > docs[pos - 2].score:
                    raise ValueError(f"run {tag!r}, query {qid!r}: scores increase at rank {pos}")
            clean[qid] = docs
        self.rankings = clean
        self.tag = tag

    def __len__(self) -> int:
        return len(self.rankings)

    def save_trec(self, path: str | Path) -> None:
        """Write ``<query_id> Q0 <doc_id> <rank> <score> <tag>`` lines."""
        with open(path, "w", encoding="utf-8") as fh:
            for qid, docs in self.rankings.items():
                for doc in docs:
                    fh.write(f"{qid} Q0 {doc.doc_id} {doc.rank} {doc.score:.6f} {self.tag}\n")

    @classmethod
    def load_trec(cls, path: str | Path) -> "RetrievalRun":
        rankings: dict[str, list[ScoredDoc]] = {}
        tag = "run"
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 6:
                    raise DataFormatError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
                qid, _, doc_id, rank, score, tag = parts
                try:
                    rankings.setdefault(qid, []).append(
                        ScoredDoc(doc_id=doc_id, score=float(score), rank=int(rank))
                    )
                except ValueError:
                    raise DataFormatError(f"{path}:{lineno}: bad rank/score field")
        try:
            return cls(rankings, tag=tag)
        except ValueError as exc:
            raise DataFormatError(f"{path}: {exc}")


def _score_rows(queries: np.ndarray, corpus: EmbeddingSet, metric: str) -> np.ndarray:
    """Similarity of each query row against every corpus doc, float64."""
    check_metric(metric)
    if queries.shape[1] != corpus.dim:
        raise ValueError(f"query dim {queries.shape[1]} != corpus dim {corpus.dim}")
    scores = queries.astype(np.float64, copy=False) @ corpus.matrix64.T
    if metric == "cos":
        doc_norms = corpus.norms64
        if np.any(doc_norms == 0.0):
            raise ValueError("cosine metric: corpus contains a zero vector")
        q_norms = np.linalg.norm(queries.astype(np.float64, copy=False), axis=1)
        if np.any(q_norms == 0.0):
            raise ValueError("cosine metric: zero query vector")
        scores = scores / (q_norms[:, None] * doc_norms[None, :])
    return scores


def _rank_rows(scores: np.ndarray, corpus: EmbeddingSet, k: int) -> np.ndarray:
    """Top-k corpus row indices per score row; ties go to the smaller doc_id."""
    by_id = corpus.id_sort_order
    ordered = scores[:, by_id]
    ranked = np.argsort(-ordered, axis=1, kind="stable")[:, : min(k, corpus.count)]
    return by_id[ranked]


def top_k(
    query: Embedding | np.ndarray,
    corpus: EmbeddingSet,
    k: int,
    metric: str = "ip",
) -> list[ScoredDoc]:
    """The ``k`` highest-similarity docs (fewer if the corpus is smaller)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    vec = query.vec if isinstance(query, Embedding) else np.asarray(query)
    if vec.ndim != 1:
        raise ValueError(f"query must be a single vector, got shape {vec.shape}")
    scores = _score_rows(vec[None, :], corpus, metric)
    rows = _rank_rows(scores, corpus, k)[0]
    return [
        ScoredDoc(doc_id=corpus.ids[r], score=float(scores[0, r]), rank=i + 1)
        for i, r in enumerate(rows)
    ]


def ndcg_at_k(
    ranking: Sequence[ScoredDoc],
    qrels_for_query: Mapping[str, int] | None,
    k: int = DEFAULT_K,
) -> float:
    """nDCG@k with exponential gain (2^rel - 1) and log2(rank+1) discount.

    Docs absent from the judgments count as relevance 0. Returns 0.0 when the
    query has no positively relevant doc at all.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not qrels_for_query:
        return 0.0
    rels = sorted(qrels_for_query.values(), reverse=True)
    idcg = sum((2**rel - 1) / math.log2(r + 2) for r, rel in enumerate(rels[:k]))
    if idcg == 0.0:
        return 0.0
    dcg = 0.0
    for doc in ranking[:k]:
        rel = qrels_for_query.get(doc.doc_id, 0)
        if rel:
            dcg += (2**rel - 1) / math.log2(doc.rank + 1)
    return dcg / idcg


def batch_instance_scores(
    query_ids: Sequence[str],
    query_embs: EmbeddingSet,
    corpus: EmbeddingSet,
    qrels: Qrels,
    metric: str = "ip",
    k: int = DEFAULT_K,
) -> dict[str, float]:
    """nDCG@k per query, retrieving with ``query_embs`` against ``corpus``.

    One matrix pass for all queries; identical results to calling
    :func:`top_k` + :func:`ndcg_at_k` per query.
    """
    if not query_ids:
        return {}
    rows = []
    for qid in query_ids:
        rows.append(query_embs.get(qid))  # raises KeyError naming the query
        if qid not in qrels:
            raise KeyError(f"no relevance judgments for query {qid!r}")
    matrix = np.stack(rows)
    scores = _score_rows(matrix, corpus, metric)
    ranked = _rank_rows(scores, corpus, k)
    out: dict[str, float] = {}
    for i, qid in enumerate(query_ids):
        judged = qrels.for_query(qid)
        ranking = [
            ScoredDoc(doc_id=corpus.ids[r], score=float(scores[i, r]), rank=pos + 1)
            for pos, r in enumerate(ranked[i])
        ]
        out[qid] = ndcg_at_k(ranking, judged, k)
    return out


def per_instance_performance(
    query_id: str,
    gate: str,
    gate_query_embs: EmbeddingSet,
    corpus: EmbeddingSet,
    qrels: Qrels,
    metric: str = "ip",
    k: int = DEFAULT_K,
) -> PerInstanceScore:
    """Performance of one gate on one instance: nDCG@k of its retrieval."""
    score = batch_instance_scores([query_id], gate_query_embs, corpus, qrels, metric, k)[query_id]
    return PerInstanceScore(query_id=query_id, gate=gate, score=score)


@dataclass(frozen=True)
class EvalResult:
    per_query: dict[str, float]
    mean: float
    skipped: int  # run queries without judgments


def evaluate_run(run: RetrievalRun, qrels: Qrels, k: int = DEFAULT_K) -> EvalResult:
    """Mean nDCG@k over the run's judged queries.

    Queries missing from the qrels are skipped and counted; an empty
    intersection is an error.
    """
    per_query: dict[str, float] = {}
    skipped = 0
    for qid, docs in run.rankings.items():
        if qid not in qrels:
            skipped += 1
            continue
        per_query[qid] = ndcg_at_k(docs, qrels.for_query(qid), k)
    if not per_query:
        raise ValueError("no overlap between run queries and qrels")
    mean = sum(per_query.values()) / len(per_query)
    return EvalResult(per_query=per_query, mean=mean, skipped=skipped)
