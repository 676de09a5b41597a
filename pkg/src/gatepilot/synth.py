"""Deterministic multi-domain retrieval world with simulated encoders.

The world is a Gaussian-cluster proxy for a family of domain-specific
datasets: each domain gets an orthonormal center, documents scatter around
their domain center, and every query is a noisy view of exactly one relevant
document. Providers differ only in noise level: the expert gate of the
query's domain sees it with ``sigma_in`` noise, the shared base encoder with
``sigma_base``, and every off-domain gate with ``sigma_out``. With
``sigma_in < sigma_base < sigma_out``, in-domain experts are strictly better
and off-domain experts actively harmful, in expectation.

Noise vectors are scaled to unit expected norm (standard normal divided by
sqrt(dim)) so the sigma parameters read as noise-to-signal ratios regardless
of dimension. All randomness is counter-keyed per entity and provider, so
regeneration is bit-reproducible and adding domains never perturbs the
embeddings of existing ones.

The corpus (context) embeddings are produced once and shared by every gate;
only query embeddings vary by provider.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from gatepilot.core import (
    DataFormatError,
    EmbeddingSet,
    GateSet,
    Qrels,
    QueryRecord,
    load_embedding_set,
    save_embedding_set,
)
from gatepilot.rng import subkey

BASE_PROVIDER = "base"


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 10
    num_domains: int = 4
    dim: int = 64
    docs_per_domain: int = 500
    train_queries_per_domain: int = 200
    test_queries_per_domain: int = 100
    sigma_in: float = 0.1
    sigma_base: float = 0.35
    sigma_out: float = 0.8
    center_spread: float = 0.12

    def __post_init__(self):
        if self.num_domains < 1:
            raise ValueError("num_domains must be >= 1")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.num_domains > self.dim:
            raise ValueError("num_domains cannot exceed dim (centers are orthonormal)")
        if not (0 < self.sigma_in < self.sigma_base < self.sigma_out):
            raise ValueError("need 0 < sigma_in < sigma_base < sigma_out")
        if self.docs_per_domain < 1:
            raise ValueError("docs_per_domain must be >= 1")
        if self.train_queries_per_domain < 0 or self.test_queries_per_domain < 0:
            raise ValueError("query counts must be >= 0")
        if self.center_spread < 0:
            raise ValueError("center_spread must be >= 0")

    @classmethod
    def from_json(cls, path: str | Path) -> "SynthConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        extra = set(raw) - known
        if extra:
            raise DataFormatError(f"{path}: unknown config fields {sorted(extra)}")
        return cls(**raw)

    def to_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2)
            fh.write("\n")

    def dataset_name(self, domain: int) -> str:
        return f"D{domain}"

    def gate_id(self, domain: int) -> str:
        return f"G{domain}"


@dataclass
class SynthWorld:
    config: SynthConfig
    gate_set: GateSet
    corpus: EmbeddingSet
    base_queries: EmbeddingSet
    gate_queries: dict[str, EmbeddingSet]
    qrels: Qrels
    train_queries: dict[str, list[QueryRecord]]
    test_queries: dict[str, list[QueryRecord]]
    dataset_to_gate: dict[str, str]

    @property
    def datasets(self) -> list[str]:
        return list(self.train_queries)

    def all_train_records(self) -> list[QueryRecord]:
        return [rec for recs in self.train_queries.values() for rec in recs]

    def all_test_records(self) -> list[QueryRecord]:
        return [rec for recs in self.test_queries.values() for rec in recs]

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_embedding_set(self.corpus, out / "corpus.emb", "bin")
        save_embedding_set(self.base_queries, out / "base_queries.emb", "bin")
        for gate, embs in self.gate_queries.items():
            save_embedding_set(embs, out / f"gate_{gate}_queries.emb", "bin")
        self.qrels.save_trec(out / "qrels.txt")
        manifest = {
            "gates": list(self.gate_set),
            "datasets": [
                {
                    "name": ds,
                    "gate": self.dataset_to_gate[ds],
                    "train": [r.query_id for r in self.train_queries[ds]],
                    "test": [r.query_id for r in self.test_queries[ds]],
                }
                for ds in self.datasets
            ],
        }
        with open(out / "datasets.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
        self.config.to_json(out / "synth.json")

    @classmethod
    def load(cls, world_dir: str | Path) -> "SynthWorld":
        d = Path(world_dir)
        config = SynthConfig.from_json(d / "synth.json")
        with open(d / "datasets.json", "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        gate_set = GateSet(manifest["gates"])
        train: dict[str, list[QueryRecord]] = {}
        test: dict[str, list[QueryRecord]] = {}
        ds_to_gate: dict[str, str] = {}
        for entry in manifest["datasets"]:
            name = entry["name"]
            ds_to_gate[name] = entry["gate"]
            train[name] = [QueryRecord(q, name) for q in entry["train"]]
            test[name] = [QueryRecord(q, name) for q in entry["test"]]
        return cls(
            config=config,
            gate_set=gate_set,
            corpus=load_embedding_set(d / "corpus.emb"),
            base_queries=load_embedding_set(d / "base_queries.emb"),
            gate_queries={
                g: load_embedding_set(d / f"gate_{g}_queries.emb") for g in gate_set
            },
            qrels=Qrels.load_trec(d / "qrels.txt"),
            train_queries=train,
            test_queries=test,
            dataset_to_gate=ds_to_gate,
        )


def _orthonormal_rows(matrix: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt on the rows; avoids LAPACK-dependent sign flips."""
    out = matrix.astype(np.float64).copy()
    for i in range(out.shape[0]):
        for j in range(i):
            out[i] -= np.dot(out[i], out[j]) * out[j]
        norm = np.linalg.norm(out[i])
        if norm < 1e-12:
            raise ValueError("degenerate random center matrix; change the seed")
        out[i] /= norm
    return out


def _unit_noise(rng: np.random.Generator, dim: int) -> np.ndarray:
    return rng.standard_normal(dim) / np.sqrt(dim)


def _normalize(vec: np.ndarray) -> np.ndarray:
    return vec / np.linalg.norm(vec)


def generate_world(config: SynthConfig) -> SynthWorld:
    """Pure function of the config; byte-identical output for equal configs."""
    T, D = config.num_domains, config.dim
    seed = config.seed
    centers = _orthonormal_rows(subkey(seed, "centers").standard_normal((T, D)))

    gate_set = GateSet(config.gate_id(i) for i in range(T))
    doc_ids: list[str] = []
    doc_vecs: list[np.ndarray] = []
    doc_vec_by_id: dict[str, np.ndarray] = {}
    for dom in range(T):
        ds = config.dataset_name(dom)
        for j in range(config.docs_per_domain):
            noise = _unit_noise(subkey(seed, "doc", ds, j), D)
            vec = _normalize(centers[dom] + config.center_spread * noise)
            doc_id = f"{ds}-doc{j}"
            doc_ids.append(doc_id)
            doc_vecs.append(vec)
            doc_vec_by_id[doc_id] = vec

    qrels_data: dict[str, dict[str, int]] = {}
    train: dict[str, list[QueryRecord]] = {}
    test: dict[str, list[QueryRecord]] = {}
    query_ids: list[str] = []
    rel_vecs: list[np.ndarray] = []
    query_domain: list[int] = []

    for dom in range(T):
        ds = config.dataset_name(dom)
        train[ds] = []
        test[ds] = []
        for split, count, bucket in (
            ("train", config.train_queries_per_domain, train[ds]),
            ("test", config.test_queries_per_domain, test[ds]),
        ):
            for j in range(count):
                qid = f"{ds}-{split}-{j}"
                rel_idx = int(subkey(seed, "rel", ds, split, j).integers(config.docs_per_domain))
                rel_doc = f"{ds}-doc{rel_idx}"
                qrels_data[qid] = {rel_doc: 1}
                bucket.append(QueryRecord(qid, ds))
                query_ids.append(qid)
                rel_vecs.append(doc_vec_by_id[rel_doc])
                query_domain.append(dom)

    def query_embeddings(provider, sigma_for):
        rows = np.zeros((len(query_ids), D), dtype=np.float64)
        for i, qid in enumerate(query_ids):
            sigma = sigma_for(query_domain[i])
            noise = _unit_noise(subkey(seed, "qnoise", qid, provider), D)
            rows[i] = _normalize(rel_vecs[i] + sigma * noise)
        return EmbeddingSet(
            query_ids, rows.astype(np.float32), dim=D, provider=provider, metric_hint="ip"
        )

    base_queries = query_embeddings(BASE_PROVIDER, lambda dom: config.sigma_base)
    gate_queries = {
        config.gate_id(g): query_embeddings(
            config.gate_id(g),
            lambda dom, g=g: config.sigma_in if dom == g else config.sigma_out,
        )
        for g in range(T)
    }

    corpus = EmbeddingSet(
        doc_ids,
        np.stack(doc_vecs).astype(np.float32),
        provider="context",
        metric_hint="ip",
    )
    return SynthWorld(
        config=config,
        gate_set=gate_set,
        corpus=corpus,
        base_queries=base_queries,
        gate_queries=gate_queries,
        qrels=Qrels(qrels_data),
        train_queries=train,
        test_queries=test,
        dataset_to_gate={config.dataset_name(i): config.gate_id(i) for i in range(T)},
    )
