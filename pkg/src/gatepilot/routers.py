"""The routing zoo.

Every router maps a query's base-encoder embedding to one gate and reports
its full per-gate score map (not just the winner), so selection-rate
matrices can be derived from any of them. Selection ties break by canonical
gate order. Routers are deterministic given their inputs and seeds; training
randomness (class balancing, negative sampling) is counter-keyed.

Routers:
  pilot   - mean similarity against the pilot library's per-gate centroids
  dataset - 1-nearest sampled training instance, labeled by its dataset's gate
  head    - one multinomial logistic regression over gates
  expert  - one binary logistic regression per gate, highest probability wins
  oracle  - per-instance best gate (reference upper bound)
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from gatepilot.core import DataFormatError, EmbeddingSet, GateSet, QueryRecord, check_metric
from gatepilot.metrics import PerInstanceScore
from gatepilot.pilots import PilotLibrary, select_max_gate
from gatepilot.rng import subkey

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RoutingDecision:
    query_id: str
    per_gate_score: dict[str, float]
    selected: str
    router_kind: str


@dataclass(frozen=True)
class TrainParams:
    """Full-batch gradient-descent settings for the classifier routers."""

    lr: float = 0.1
    epochs: int = 200
    l2: float = 1e-4
    seed: int = 10


@dataclass(frozen=True)
class LinearClassifier:
    weights: np.ndarray  # (num_classes, dim); (1, dim) for binary
    bias: np.ndarray  # (num_classes,)
    class_labels: tuple[str, ...]
    kind: str  # "softmax" | "sigmoid"
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64)
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
            raise ValueError("classifier parameters must be finite")
        if len(set(self.class_labels)) != len(self.class_labels):
            raise ValueError("duplicate class labels")
        weights.flags.writeable = False
        bias.flags.writeable = False
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)
        object.__setattr__(self, "class_labels", tuple(self.class_labels))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _as_matrix(query) -> np.ndarray:
    vec = np.asarray(query.vec if hasattr(query, "vec") else query, dtype=np.float64)
    if vec.ndim != 1:
        raise ValueError(f"expected a single query vector, got shape {vec.shape}")
    return vec[None, :]


# ---------------------------------------------------------------------------
# pilot routing


def route_pilot_batch(
    queries: np.ndarray, query_ids: Sequence[str], library: PilotLibrary
) -> list[RoutingDecision]:
    """Route many queries in one matrix pass against the library centroids."""
    if len(library) == 0:
        raise ValueError("pilot library has no entries")
    check_metric(library.metric)
    queries = np.asarray(queries, dtype=np.float64)
    if queries.shape[1] != library.dim:
        raise ValueError(f"query dim {queries.shape[1]} != library dim {library.dim}")
    centroids = np.stack([e.centroid for e in library.entries])
    sims = queries @ centroids.T
    if library.metric == "cos":
        c_norms = np.linalg.norm(centroids, axis=1)
        q_norms = np.linalg.norm(queries, axis=1)
        if np.any(c_norms == 0.0) or np.any(q_norms == 0.0):
            raise ValueError("cosine metric: zero vector in query or centroid")
        sims = sims / (q_norms[:, None] * c_norms[None, :])
    gate_cols = {
        gate: [i for i, e in enumerate(library.entries) if e.gate == gate]
        for gate in library.gates_with_entries()
    }
    decisions = []
    for row, qid in enumerate(query_ids):
        scores = {gate: float(sims[row, cols].mean()) for gate, cols in gate_cols.items()}
        selected, _ = select_max_gate(scores, library.gate_set, tol=0.0)
        decisions.append(
            RoutingDecision(
                query_id=qid, per_gate_score=scores, selected=selected, router_kind="pilot"
            )
        )
    return decisions


def route_pilot(query_base_emb, library: PilotLibrary, query_id: str = "") -> RoutingDecision:
    """Gate with the highest mean similarity to its pilot embeddings.

    Gates without library entries are unroutable and excluded from the
    arg-max (scoring them minus infinity would silently prefer untrained
    gates on negative-similarity queries).
    """
    return route_pilot_batch(_as_matrix(query_base_emb), [query_id], library)[0]


# ---------------------------------------------------------------------------
# dataset router


@dataclass(frozen=True)
class DatasetSampleIndex:
    """Sampled training instances in base space, each tagged by its dataset's gate."""

    embeddings: np.ndarray  # (n, dim) float64
    gates: tuple[str, ...]
    gate_set: GateSet
    per_dataset_count: int
    metric: str = "ip"

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != len(self.gates):
            raise ValueError("index embeddings and gate tags disagree")
        emb.flags.writeable = False
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "gates", tuple(self.gates))

    def __len__(self) -> int:
        return len(self.gates)


def build_dataset_sample_index(
    train_queries: Sequence[QueryRecord],
    base_query_embs: EmbeddingSet,
    dataset_to_gate: Mapping[str, str],
    gate_set: GateSet,
    n: int = 100,
    seed: int = 10,
    metric: str = "ip",
) -> DatasetSampleIndex:
    """Seeded uniform sample of up to ``n`` instances per dataset."""
    by_dataset: dict[str, list[QueryRecord]] = {}
    for rec in train_queries:
        by_dataset.setdefault(rec.source_dataset, []).append(rec)
    embeddings: list[np.ndarray] = []
    gates: list[str] = []
    for ds, recs in by_dataset.items():
        if ds not in dataset_to_gate:
            raise ValueError(f"dataset {ds!r} has no gate mapping")
        gate = dataset_to_gate[ds]
        if gate not in gate_set:
            raise ValueError(f"dataset {ds!r} maps to unknown gate {gate!r}")
        if not recs:
            raise ValueError(f"dataset {ds!r} has no training instances")
        take = min(n, len(recs))
        rng = subkey(seed, "dataset-sample", ds)
        chosen = sorted(rng.choice(len(recs), size=take, replace=False).tolist())
        for idx in chosen:
            embeddings.append(base_query_embs.get(recs[idx].query_id).astype(np.float64))
            gates.append(gate)
    return DatasetSampleIndex(
        embeddings=np.stack(embeddings),
        gates=tuple(gates),
        gate_set=gate_set,
        per_dataset_count=n,
        metric=metric,
    )


def route_dataset_batch(
    queries: np.ndarray, query_ids: Sequence[str], index: DatasetSampleIndex
) -> list[RoutingDecision]:
    if len(index) == 0:
        raise ValueError("dataset sample index is empty")
    queries = np.asarray(queries, dtype=np.float64)
    sims = queries @ index.embeddings.T
    if index.metric == "cos":
        s_norms = np.linalg.norm(index.embeddings, axis=1)
        q_norms = np.linalg.norm(queries, axis=1)
        if np.any(s_norms == 0.0) or np.any(q_norms == 0.0):
            raise ValueError("cosine metric: zero vector in query or sample")
        sims = sims / (q_norms[:, None] * s_norms[None, :])
    gate_cols = {
        gate: [i for i, g in enumerate(index.gates) if g == gate]
        for gate in index.gate_set
        if gate in index.gates
    }
    decisions = []
    for row, qid in enumerate(query_ids):
        scores = {gate: float(sims[row, cols].max()) for gate, cols in gate_cols.items()}
        selected, _ = select_max_gate(scores, index.gate_set, tol=0.0)
        decisions.append(
            RoutingDecision(
                query_id=qid, per_gate_score=scores, selected=selected, router_kind="dataset"
            )
        )
    return decisions


def route_dataset(query_base_emb, index: DatasetSampleIndex, query_id: str = "") -> RoutingDecision:
    """Gate of the most similar sampled training instance (1-NN)."""
    return route_dataset_batch(_as_matrix(query_base_emb), [query_id], index)[0]


# ---------------------------------------------------------------------------
# classifier routers


def _balanced_indices(labels: Sequence[str], classes: Sequence[str], seed: int) -> np.ndarray:
    """Seeded downsampling of every class to the minority-class count."""
    by_class = {c: np.flatnonzero(np.asarray(labels, dtype=object) == c) for c in classes}
    m = min(len(idx) for idx in by_class.values())
    kept: list[np.ndarray] = []
    for c in classes:
        idx = by_class[c]
        if len(idx) > m:
            rng = subkey(seed, "balance", c)
            idx = np.sort(rng.choice(idx, size=m, replace=False))
        kept.append(idx)
    return np.concatenate(kept)


def _class_order(labels: Sequence[str], gate_order: Iterable[str] | None) -> list[str]:
    present = set(labels)
    if gate_order is not None:
        ordered = [g for g in gate_order if g in present]
        if len(ordered) != len(present):
            raise ValueError(f"labels {sorted(present - set(ordered))} missing from gate order")
        return ordered
    seen: list[str] = []
    for lab in labels:
        if lab not in seen:
            seen.append(lab)
    return seen


def train_head_router(
    features: np.ndarray,
    labels: Sequence[str],
    params: TrainParams = TrainParams(),
    gate_order: Iterable[str] | None = None,
) -> LinearClassifier:
    """Multinomial logistic regression from base embeddings to gate labels.

    Classes are balanced by seeded downsampling to the smallest class before
    training (full-batch gradient descent on cross-entropy with L2, zero
    init). Callers must pass untied instances only.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = list(labels)
    if features.shape[0] != len(labels):
        raise ValueError("features and labels disagree in length")
    classes = _class_order(labels, gate_order)
    if len(classes) < 2:
        raise ValueError("head router needs at least 2 distinct classes")
    keep = _balanced_indices(labels, classes, params.seed)
    X = features[keep]
    class_index = {c: i for i, c in enumerate(classes)}
    y = np.array([class_index[labels[i]] for i in keep])
    n, dim = X.shape
    Y = np.zeros((n, len(classes)))
    Y[np.arange(n), y] = 1.0

    W = np.zeros((len(classes), dim))
    b = np.zeros(len(classes))
    for _ in range(params.epochs):
        probs = _softmax(X @ W.T + b)
        G = (probs - Y) / n
        W -= params.lr * (G.T @ X + 2.0 * params.l2 * W)
        b -= params.lr * G.sum(axis=0)
    meta = {
        "lr": params.lr,
        "epochs": params.epochs,
        "l2": params.l2,
        "seed": params.seed,
        "per_class": int(n // len(classes)),
    }
    return LinearClassifier(W, b, tuple(classes), kind="softmax", training_meta=meta)


def route_head_batch(
    queries: np.ndarray, query_ids: Sequence[str], clf: LinearClassifier
) -> list[RoutingDecision]:
    if clf.kind != "softmax":
        raise ValueError(f"expected a softmax classifier, got {clf.kind!r}")
    queries = np.asarray(queries, dtype=np.float64)
    if queries.shape[1] != clf.weights.shape[1]:
        raise ValueError(f"query dim {queries.shape[1]} != classifier dim {clf.weights.shape[1]}")
    probs = _softmax(queries @ clf.weights.T + clf.bias)
    decisions = []
    for row, qid in enumerate(query_ids):
        scores = {c: float(probs[row, i]) for i, c in enumerate(clf.class_labels)}
        selected, _ = select_max_gate(scores, clf.class_labels, tol=0.0)
        decisions.append(
            RoutingDecision(
                query_id=qid, per_gate_score=scores, selected=selected, router_kind="head"
            )
        )
    return decisions


def route_head(query_base_emb, clf: LinearClassifier, query_id: str = "") -> RoutingDecision:
    """Softmax over gate logits; the most probable gate wins."""
    return route_head_batch(_as_matrix(query_base_emb), [query_id], clf)[0]


def _train_binary(X: np.ndarray, y: np.ndarray, params: TrainParams) -> tuple[np.ndarray, float]:
    n, dim = X.shape
    w = np.zeros(dim)
    b = 0.0
    for _ in range(params.epochs):
        p = 1.0 / (1.0 + np.exp(-(X @ w + b)))
        g = (p - y) / n
        w -= params.lr * (X.T @ g + 2.0 * params.l2 * w)
        b -= params.lr * float(g.sum())
    return w, b


def train_expert_classifiers(
    features: np.ndarray,
    labels: Sequence[str],
    params: TrainParams = TrainParams(),
    gate_order: Iterable[str] | None = None,
) -> dict[str, LinearClassifier]:
    """One select/not-select binary classifier per gate.

    Positives are the instances whose winning gate is the classifier's gate;
    negatives are an equal-size seeded sample of the rest. Gates with no
    positives are omitted with a warning.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = list(labels)
    if features.shape[0] != len(labels):
        raise ValueError("features and labels disagree in length")
    classes = _class_order(labels, gate_order)
    label_arr = np.asarray(labels, dtype=object)
    classifiers: dict[str, LinearClassifier] = {}
    order = list(gate_order) if gate_order is not None else classes
    for gate in order:
        pos = np.flatnonzero(label_arr == gate)
        if len(pos) == 0:
            log.warning("expert classifier for gate %s omitted: no positive instances", gate)
            continue
        pool = np.flatnonzero(label_arr != gate)
        if len(pool) == 0:
            raise ValueError(f"gate {gate!r}: no negative instances available")
        take = min(len(pos), len(pool))
        rng = subkey(params.seed, "negatives", gate)
        neg = np.sort(rng.choice(pool, size=take, replace=False))
        if take < len(pos):
            rng_pos = subkey(params.seed, "positives", gate)
            pos = np.sort(rng_pos.choice(pos, size=take, replace=False))
        X = np.concatenate([features[pos], features[neg]])
        y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
        w, b = _train_binary(X, y, params)
        meta = {
            "lr": params.lr,
            "epochs": params.epochs,
            "l2": params.l2,
            "seed": params.seed,
            "positives": int(len(pos)),
            "negatives": int(len(neg)),
        }
        classifiers[gate] = LinearClassifier(
            w[None, :], np.array([b]), (gate,), kind="sigmoid", training_meta=meta
        )
    if not classifiers:
        raise ValueError("no expert classifier could be trained (no gate has positives)")
    return classifiers


def route_expert_classifier_batch(
    queries: np.ndarray, query_ids: Sequence[str], classifiers: Mapping[str, LinearClassifier]
) -> list[RoutingDecision]:
    if not classifiers:
        raise ValueError("no expert classifiers given")
    queries = np.asarray(queries, dtype=np.float64)
    gates = list(classifiers)
    probs = np.zeros((queries.shape[0], len(gates)))
    for j, gate in enumerate(gates):
        clf = classifiers[gate]
        if clf.kind != "sigmoid":
            raise ValueError(f"expected sigmoid classifiers, got {clf.kind!r} for {gate!r}")
        logits = queries @ clf.weights[0] + clf.bias[0]
        probs[:, j] = 1.0 / (1.0 + np.exp(-logits))
    decisions = []
    for row, qid in enumerate(query_ids):
        scores = {gate: float(probs[row, j]) for j, gate in enumerate(gates)}
        selected, _ = select_max_gate(scores, gates, tol=0.0)
        decisions.append(
            RoutingDecision(
                query_id=qid, per_gate_score=scores, selected=selected, router_kind="expert"
            )
        )
    return decisions


def route_expert_classifier(
    query_base_emb, classifiers: Mapping[str, LinearClassifier], query_id: str = ""
) -> RoutingDecision:
    """Per-gate select probability (sigmoid); the highest wins."""
    return route_expert_classifier_batch(_as_matrix(query_base_emb), [query_id], classifiers)[0]


# ---------------------------------------------------------------------------
# oracle references


def route_oracle(
    per_gate_scores: Mapping[str, "PerInstanceScore | float"],
    gate_order: Iterable[str] | None = None,
    query_id: str = "",
) -> RoutingDecision:
    """Instance-level oracle: the gate with the highest measured performance."""
    if not per_gate_scores:
        raise ValueError("oracle needs at least one gate score")
    scores: dict[str, float] = {}
    for gate, value in per_gate_scores.items():
        if isinstance(value, PerInstanceScore):
            scores[gate] = float(value.score)
            query_id = query_id or value.query_id
        else:
            scores[gate] = float(value)
    order = list(gate_order) if gate_order is not None else list(scores)
    selected, _ = select_max_gate(scores, order, tol=0.0)
    return RoutingDecision(
        query_id=query_id, per_gate_score=scores, selected=selected, router_kind="oracle"
    )


def best_individual(
    per_gate_dataset_means: Mapping[str, float], gate_order: Iterable[str] | None = None
) -> str:
    """Dataset-level oracle: the single gate with the best dataset mean."""
    if not per_gate_dataset_means:
        raise ValueError("best_individual needs at least one gate mean")
    order = list(gate_order) if gate_order is not None else list(per_gate_dataset_means)
    selected, _ = select_max_gate(per_gate_dataset_means, order, tol=0.0)
    return selected


# ---------------------------------------------------------------------------
# persistence


def _classifier_dict(clf: LinearClassifier) -> dict:
    return {
        "kind": clf.kind,
        "weights": [[float(v) for v in row] for row in clf.weights],
        "bias": [float(v) for v in clf.bias],
        "class_labels": list(clf.class_labels),
        "training_meta": clf.training_meta,
    }


def _classifier_from_dict(raw: dict, where: str) -> LinearClassifier:
    for field_name in ("kind", "weights", "bias", "class_labels"):
        if field_name not in raw:
            raise DataFormatError(f"{where}: missing field {field_name!r}")
    try:
        return LinearClassifier(
            weights=np.asarray(raw["weights"], dtype=np.float64),
            bias=np.asarray(raw["bias"], dtype=np.float64),
            class_labels=tuple(raw["class_labels"]),
            kind=raw["kind"],
            training_meta=raw.get("training_meta", {}),
        )
    except ValueError as exc:
        raise DataFormatError(f"{where}: {exc}")


def save_classifier(clf: LinearClassifier, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_classifier_dict(clf), fh, indent=1)
        fh.write("\n")


def load_classifier(path: str | Path) -> LinearClassifier:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return _classifier_from_dict(raw, str(path))


def save_expert_classifiers(classifiers: Mapping[str, LinearClassifier], path: str | Path) -> None:
    doc = {
        "kind": "expert-bundle",
        "classifiers": {g: _classifier_dict(c) for g, c in classifiers.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_expert_classifiers(path: str | Path) -> dict[str, LinearClassifier]:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if raw.get("kind") != "expert-bundle":
        raise DataFormatError(f"{path}: not an expert classifier bundle")
    return {
        gate: _classifier_from_dict(doc, f"{path}: classifiers[{gate}]")
        for gate, doc in raw["classifiers"].items()
    }


def save_sample_index(index: DatasetSampleIndex, path: str | Path) -> None:
    doc = {
        "kind": "dataset-sample-index",
        "gate_set": list(index.gate_set),
        "per_dataset_count": index.per_dataset_count,
        "metric": index.metric,
        "samples": [
            {"gate": g, "vec": [float(v) for v in index.embeddings[i]]}
            for i, g in enumerate(index.gates)
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_sample_index(path: str | Path) -> DatasetSampleIndex:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if raw.get("kind") != "dataset-sample-index":
        raise DataFormatError(f"{path}: not a dataset sample index")
    samples = raw["samples"]
    try:
        return DatasetSampleIndex(
            embeddings=np.asarray([s["vec"] for s in samples], dtype=np.float64),
            gates=tuple(s["gate"] for s in samples),
            gate_set=GateSet(raw["gate_set"]),
            per_dataset_count=int(raw["per_dataset_count"]),
            metric=raw.get("metric", "ip"),
        )
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"{path}: {exc}")
