"""Pilot embedding library: max-gate assignment, grouping, and centroiding.

For every training instance we score each gate's retrieval (nDCG@10 of the
gate's query embedding against the corpus) and record the arg-max gate. The
instances of each source dataset are then grouped by their winning gate, and
each non-empty group is compressed to k centroids of the instances'
*base-encoder* embeddings (k=1, the default, is just the group mean). The
resulting (gate, source_dataset, centroid) entries are the routing reference
points; with k=1 there can be at most gates x datasets of them.

Ties within 1e-9 of the max go to the earliest gate in canonical order and
are flagged, so downstream consumers can exclude them (the classifier
routers train on untied instances only).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from gatepilot.core import DataFormatError, EmbeddingSet, GateSet, Qrels, QueryRecord
from gatepilot.metrics import batch_instance_scores
from gatepilot.rng import subkey

TIE_TOL = 1e-9

KMEANS_MOVE_TOL = 1e-6
KMEANS_MAX_ITER = 100


@dataclass(frozen=True)
class MaxGateAssignment:
    query_id: str
    source_dataset: str
    per_gate_scores: dict[str, float]
    max_gate: str
    tied: bool


@dataclass(frozen=True)
class PilotEntry:
    gate: str
    source_dataset: str
    centroid: np.ndarray  # base-encoder space, float64
    member_count: int

    def __post_init__(self):
        centroid = np.asarray(self.centroid, dtype=np.float64)
        if centroid.ndim != 1:
            raise ValueError("centroid must be a 1-D vector")
        if not np.all(np.isfinite(centroid)):
            raise ValueError("centroid has non-finite entries")
        if self.member_count < 1:
            raise ValueError("member_count must be >= 1")
        centroid.flags.writeable = False
        object.__setattr__(self, "centroid", centroid)


class PilotLibrary:
    """The set of (gate, source_dataset, centroid) routing reference points."""

    def __init__(
        self,
        gate_set: GateSet,
        entries: Sequence[PilotEntry],
        *,
        metric: str = "ip",
        k: int = 1,
        seed: int = 10,
    ):
        entries = tuple(entries)
        dims = {e.centroid.shape[0] for e in entries}
        if len(dims) > 1:
            raise ValueError(f"inconsistent centroid dims {sorted(dims)}")
        for i, e in enumerate(entries):
            if e.gate not in gate_set:
                raise ValueError(f"entries[{i}].gate: unknown gate {e.gate!r}")
        self.gate_set = gate_set
        self.entries = entries
        self.metric = metric
        self.k = int(k)
        self.seed = int(seed)

    @property
    def dim(self) -> int | None:
        return int(self.entries[0].centroid.shape[0]) if self.entries else None

    def __len__(self) -> int:
        return len(self.entries)

    def entries_for(self, gate: str) -> list[PilotEntry]:
        return [e for e in self.entries if e.gate == gate]

    def gates_with_entries(self) -> list[str]:
        present = {e.gate for e in self.entries}
        return [g for g in self.gate_set if g in present]

    def to_json_dict(self) -> dict:
        return {
            "gates": list(self.gate_set),
            "metric": self.metric,
            "k": self.k,
            "seed": self.seed,
            "entries": [
                {
                    "gate": e.gate,
                    "source_dataset": e.source_dataset,
                    "member_count": e.member_count,
                    "centroid": [float(v) for v in e.centroid],
                }
                for e in self.entries
            ],
        }


def select_max_gate(
    per_gate_scores: Mapping[str, float], order: Iterable[str], tol: float = TIE_TOL
) -> tuple[str, bool]:
    """Arg-max with canonical-order tie-breaking.

    Returns (winner, tied); ``tied`` is True when two or more gates come
    within ``tol`` of the maximum.
    """
    gates = [g for g in order if g in per_gate_scores]
    if not gates:
        raise ValueError("no gates to select among")
    best = max(per_gate_scores[g] for g in gates)
    attaining = [g for g in gates if per_gate_scores[g] >= best - tol]
    return attaining[0], len(attaining) >= 2


def score_gate_queries(
    queries: Sequence[QueryRecord],
    gate_query_embs: Mapping[str, EmbeddingSet],
    corpus: EmbeddingSet,
    qrels: Qrels,
    metric: str = "ip",
) -> dict[str, dict[str, float]]:
    """Per-gate nDCG@10 table: gate -> query_id -> score."""
    qids = [q.query_id for q in queries]
    return {
        gate: batch_instance_scores(qids, embs, corpus, qrels, metric)
        for gate, embs in gate_query_embs.items()
    }


def assign_max_gates(
    train_queries: Sequence[QueryRecord],
    gate_query_embs: Mapping[str, EmbeddingSet],
    corpus: EmbeddingSet,
    qrels: Qrels,
    metric: str = "ip",
    gate_set: GateSet | None = None,
    score_table: Mapping[str, Mapping[str, float]] | None = None,
) -> list[MaxGateAssignment]:
    """One arg-max assignment per training instance.

    ``score_table`` (gate -> query_id -> score) can be supplied to reuse
    scores across repeated builds; otherwise it is computed here.
    """
    if not train_queries:
        raise ValueError("empty training query list")
    if gate_set is None:
        gate_set = GateSet(gate_query_embs.keys())
    if score_table is None:
        score_table = score_gate_queries(train_queries, gate_query_embs, corpus, qrels, metric)
    assignments = []
    for rec in train_queries:
        scores = {g: float(score_table[g][rec.query_id]) for g in gate_set}
        winner, tied = select_max_gate(scores, gate_set)
        assignments.append(
            MaxGateAssignment(
                query_id=rec.query_id,
                source_dataset=rec.source_dataset,
                per_gate_scores=scores,
                max_gate=winner,
                tied=tied,
            )
        )
    return assignments


def kmeans(points, k: int, seed: int = 10) -> list[np.ndarray]:
    """Deterministic k-means over row vectors.

    k=1 returns the arithmetic mean (the Lloyd fixed point). k >= len(points)
    returns the points themselves. Otherwise: seeded k-means++ init, Lloyd
    iterations until max centroid movement < 1e-6 or 100 rounds. Centroids
    come back ordered by their first-assigned member index; clusters that end
    up empty are dropped.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("points must be a non-empty list of vectors")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n = pts.shape[0]
    if k == 1:
        return [pts.mean(axis=0)]
    if k >= n:
        return [pts[i].copy() for i in range(n)]

    rng = subkey(seed, "kmeans", n, k)
    centroids = np.zeros((k, pts.shape[1]))
    centroids[0] = pts[int(rng.integers(n))]
    d2 = np.sum((pts - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total == 0.0:
            centroids[c:] = centroids[0]  # all points identical
            break
        centroids[c] = pts[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, np.sum((pts - centroids[c]) ** 2, axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        dists = np.sum((pts[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        labels = np.argmin(dists, axis=1)  # ties to the lowest centroid index
        moved = 0.0
        for c in range(k):
            members = pts[labels == c]
            if len(members) == 0:
                continue  # keep the previous centroid
            new = members.mean(axis=0)
            moved = max(moved, float(np.linalg.norm(new - centroids[c])))
            centroids[c] = new
        if moved < KMEANS_MOVE_TOL:
            break

    first_member: dict[int, int] = {}
    for i, lab in enumerate(labels):
        first_member.setdefault(int(lab), i)
    ordered = sorted(first_member, key=first_member.get)
    return [centroids[c].copy() for c in ordered]


def _cluster_counts(points: np.ndarray, centroids: Sequence[np.ndarray]) -> list[int]:
    cents = np.stack(centroids)
    dists = np.sum((points[:, None, :] - cents[None, :, :]) ** 2, axis=2)
    labels = np.argmin(dists, axis=1)
    return [int(np.sum(labels == c)) for c in range(len(centroids))]


def build_pilot_library(
    assignments: Sequence[MaxGateAssignment],
    base_query_embs: EmbeddingSet,
    gate_set: GateSet,
    k: int = 1,
    seed: int = 10,
    metric: str = "ip",
    include_tied: bool = True,
) -> PilotLibrary:
    """Group assignments by (source dataset, winning gate) and centroid them.

    Centroids are computed over the instances' *base-encoder* embeddings;
    empty groups contribute no entry. ``include_tied=False`` drops flagged
    tie instances before grouping (sensitivity variant; the default keeps
    them).
    """
    if not include_tied:
        assignments = [a for a in assignments if not a.tied]
    dataset_order: list[str] = []
    groups: dict[tuple[str, str], list[str]] = {}
    for a in assignments:
        if a.max_gate not in gate_set:
            raise ValueError(f"assignment {a.query_id!r}: unknown gate {a.max_gate!r}")
        if a.source_dataset not in dataset_order:
            dataset_order.append(a.source_dataset)
        groups.setdefault((a.source_dataset, a.max_gate), []).append(a.query_id)

    entries: list[PilotEntry] = []
    for ds in dataset_order:
        for gate in gate_set:
            members = groups.get((ds, gate))
            if not members:
                continue
            pts = np.stack([base_query_embs.get(q) for q in members]).astype(np.float64)
            centroids = kmeans(pts, k, seed)
            counts = [len(members)] if len(centroids) == 1 else _cluster_counts(pts, centroids)
            for centroid, count in zip(centroids, counts):
                if count == 0:
                    continue
                entries.append(
                    PilotEntry(
                        gate=gate, source_dataset=ds, centroid=centroid, member_count=count
                    )
                )
    return PilotLibrary(gate_set, entries, metric=metric, k=k, seed=seed)


def save_library(library: PilotLibrary, path: str | Path) -> None:
    """JSON with full-precision centroids; stable field order for diffing."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(library.to_json_dict(), fh, indent=1)
        fh.write("\n")


def load_library(path: str | Path) -> PilotLibrary:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: invalid JSON: {exc}")
    for field in ("gates", "metric", "k", "seed", "entries"):
        if field not in raw:
            raise DataFormatError(f"{path}: missing field {field!r}")
    try:
        gate_set = GateSet(raw["gates"])
    except ValueError as exc:
        raise DataFormatError(f"{path}: gates: {exc}")
    entries = []
    for i, e in enumerate(raw["entries"]):
        for field in ("gate", "source_dataset", "member_count", "centroid"):
            if field not in e:
                raise DataFormatError(f"{path}: entries[{i}]: missing field {field!r}")
        try:
            entries.append(
                PilotEntry(
                    gate=e["gate"],
                    source_dataset=e["source_dataset"],
                    centroid=np.asarray(e["centroid"], dtype=np.float64),
                    member_count=int(e["member_count"]),
                )
            )
        except ValueError as exc:
            raise DataFormatError(f"{path}: entries[{i}]: {exc}")
    try:
        return PilotLibrary(
            gate_set, entries, metric=raw["metric"], k=int(raw["k"]), seed=int(raw["seed"])
        )
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}")


def write_assignments_csv(
    assignments: Sequence[MaxGateAssignment], gate_set: GateSet, path: str | Path
) -> None:
    """``query_id,source_dataset,max_gate,tied,<score per gate>`` rows."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "source_dataset", "max_gate", "tied", *gate_set])
        for a in assignments:
            writer.writerow(
                [
                    a.query_id,
                    a.source_dataset,
                    a.max_gate,
                    str(a.tied).lower(),
                    *(repr(a.per_gate_scores[g]) for g in gate_set),
                ]
            )


def read_assignments_csv(path: str | Path) -> tuple[list[MaxGateAssignment], GateSet]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:4] != ["query_id", "source_dataset", "max_gate", "tied"]:
            raise DataFormatError(f"{path}: not an assignments CSV")
        gate_set = GateSet(header[4:])
        assignments = []
        for row in reader:
            if len(row) != len(header):
                raise DataFormatError(f"{path}: row with {len(row)} fields, expected {len(header)}")
            scores = {g: float(v) for g, v in zip(gate_set, row[4:])}
            assignments.append(
                MaxGateAssignment(
                    query_id=row[0],
                    source_dataset=row[1],
                    max_gate=row[2],
                    tied=row[3] == "true",
                    per_gate_scores=scores,
                )
            )
    return assignments, gate_set
