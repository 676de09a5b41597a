"""Experiment orchestration: full comparison runs and ablations.

A run loads a world (corpus + base/gate query embeddings + qrels + dataset
manifest), builds the pilot library and the baseline routers from the train
split, then routes every test query with every requested router and scores
the retrieval of the selected gate. Reference rows (instance-level oracle,
dataset-level best-individual, and every single provider on its own) are
always computed. Outputs are CSV plus a meta.json; reruns of the same config
are byte-identical.

Per-gate nDCG score tables are computed once per provider and reused across
routers, gate-subset ablations, and pilot-count ablations, so an ablation
varies exactly what it claims to vary.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from gatepilot.core import (
    DataFormatError,
    GateSet,
    Qrels,
    QueryRecord,
    check_metric,
    load_embedding_set,
)
from gatepilot.metrics import batch_instance_scores
from gatepilot.pilots import (
    MaxGateAssignment,
    PilotLibrary,
    assign_max_gates,
    build_pilot_library,
    save_library,
    select_max_gate,
    write_assignments_csv,
)
from gatepilot.routers import (
    RoutingDecision,
    TrainParams,
    build_dataset_sample_index,
    route_dataset_batch,
    route_expert_classifier_batch,
    route_head_batch,
    route_pilot_batch,
    train_expert_classifiers,
    train_head_router,
)

ROUTER_KINDS = ("pilot", "dataset", "head", "expert")

ORACLE_ROW = "oracle"
BEST_INDIVIDUAL_ROW = "best-individual"
BASE_ROW = "base"

TIE_TOL = 1e-9


@dataclass
class ExperimentConfig:
    corpus: Path
    base_queries: Path
    gate_queries: dict[str, Path]
    qrels: Path
    datasets: Path
    gates: list[str]
    routers: list[str] = field(default_factory=lambda: list(ROUTER_KINDS))
    metric: str = "ip"
    pilots_k: int = 1
    seed: int = 10
    dataset_samples: int = 100
    include_tied_pilots: bool = True

    def __post_init__(self):
        check_metric(self.metric)
        for r in self.routers:
            if r not in ROUTER_KINDS:
                raise ValueError(f"unknown router {r!r}; expected one of {ROUTER_KINDS}")
        missing = set(self.gates) - set(self.gate_queries)
        if missing:
            raise ValueError(f"gates {sorted(missing)} have no query embedding path")
        if self.pilots_k < 1:
            raise ValueError("pilots_k must be >= 1")

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        base_dir = path.parent

        def resolve(p):
            p = Path(p)
            return p if p.is_absolute() else base_dir / p

        try:
            return cls(
                corpus=resolve(raw["corpus"]),
                base_queries=resolve(raw["base_queries"]),
                gate_queries={g: resolve(p) for g, p in raw["gate_queries"].items()},
                qrels=resolve(raw["qrels"]),
                datasets=resolve(raw["datasets"]),
                gates=list(raw["gates"]),
                routers=list(raw.get("routers", ROUTER_KINDS)),
                metric=raw.get("metric", "ip"),
                pilots_k=int(raw.get("k", 1)),
                seed=int(raw.get("seed", 10)),
                dataset_samples=int(raw.get("dataset_samples", 100)),
                include_tied_pilots=bool(raw.get("include_tied_pilots", True)),
            )
        except KeyError as exc:
            raise DataFormatError(f"{path}: missing config field {exc}")

    @classmethod
    def for_world_dir(cls, world_dir: str | Path, **overrides) -> "ExperimentConfig":
        """Config pointing at a directory written by SynthWorld.save."""
        d = Path(world_dir)
        with open(d / "datasets.json", "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        gates = list(manifest["gates"])
        return cls(
            corpus=d / "corpus.emb",
            base_queries=d / "base_queries.emb",
            gate_queries={g: d / f"gate_{g}_queries.emb" for g in gates},
            qrels=d / "qrels.txt",
            datasets=d / "datasets.json",
            gates=gates,
            **overrides,
        )

    def fingerprint(self) -> str:
        doc = {
            "corpus": str(self.corpus),
            "base_queries": str(self.base_queries),
            "gate_queries": {g: str(p) for g, p in sorted(self.gate_queries.items())},
            "qrels": str(self.qrels),
            "datasets": str(self.datasets),
            "gates": self.gates,
            "routers": self.routers,
            "metric": self.metric,
            "k": self.pilots_k,
            "seed": self.seed,
            "dataset_samples": self.dataset_samples,
            "include_tied_pilots": self.include_tied_pilots,
        }
        blob = json.dumps(doc, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


class ExperimentData:
    """Loaded world plus lazily cached per-provider score tables."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.corpus = load_embedding_set(config.corpus)
        self.base = load_embedding_set(config.base_queries)
        self.gate_embs = {g: load_embedding_set(p) for g, p in config.gate_queries.items()}
        self.qrels = Qrels.load_trec(config.qrels)
        with open(config.datasets, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        self.gate_set = GateSet(config.gates)
        self.dataset_to_gate: dict[str, str] = {}
        self.train: dict[str, list[QueryRecord]] = {}
        self.test: dict[str, list[QueryRecord]] = {}
        for entry in manifest["datasets"]:
            name = entry["name"]
            self.dataset_to_gate[name] = entry["gate"]
            self.train[name] = [QueryRecord(q, name) for q in entry["train"]]
            self.test[name] = [QueryRecord(q, name) for q in entry["test"]]
        self._validate_dims()
        self._train_table: dict[str, dict[str, float]] = {}
        self._test_table: dict[str, dict[str, float]] = {}
        self._base_test: dict[str, float] | None = None
        self._base_train_matrix: np.ndarray | None = None
        self._base_test_matrix: np.ndarray | None = None

    def _validate_dims(self):
        dims = {self.corpus.dim, self.base.dim, *(e.dim for e in self.gate_embs.values())}
        if len(dims) != 1:
            raise ValueError(f"embedding sets disagree on dim: {sorted(dims)}")
        for g in self.gate_set:
            if g not in self.gate_embs:
                raise ValueError(f"gate {g!r} has no query embedding set")

    @property
    def datasets(self) -> list[str]:
        return list(self.train)

    def train_records(self) -> list[QueryRecord]:
        return [r for recs in self.train.values() for r in recs]

    def test_records(self) -> list[QueryRecord]:
        return [r for recs in self.test.values() for r in recs]

    def train_scores(self, gate: str) -> dict[str, float]:
        if gate not in self._train_table:
            qids = [r.query_id for r in self.train_records()]
            self._train_table[gate] = batch_instance_scores(
                qids, self.gate_embs[gate], self.corpus, self.qrels, self.config.metric
            )
        return self._train_table[gate]

    def test_scores(self, gate: str) -> dict[str, float]:
        if gate not in self._test_table:
            qids = [r.query_id for r in self.test_records()]
            self._test_table[gate] = batch_instance_scores(
                qids, self.gate_embs[gate], self.corpus, self.qrels, self.config.metric
            )
        return self._test_table[gate]

    def base_test_scores(self) -> dict[str, float]:
        if self._base_test is None:
            qids = [r.query_id for r in self.test_records()]
            self._base_test = batch_instance_scores(
                qids, self.base, self.corpus, self.qrels, self.config.metric
            )
        return self._base_test

    def base_matrix(self, records: Sequence[QueryRecord]) -> np.ndarray:
        return np.stack([self.base.get(r.query_id) for r in records]).astype(np.float64)


def _constant_decisions(qids: Sequence[str], gate: str, kind: str) -> list[RoutingDecision]:
    return [
        RoutingDecision(query_id=qid, per_gate_score={gate: 1.0}, selected=gate, router_kind=kind)
        for qid in qids
    ]


@dataclass
class RouterArtifacts:
    library: PilotLibrary
    assignments: list[MaxGateAssignment]
    decisions: dict[str, list[RoutingDecision]]
    notes: list[str] = field(default_factory=list)


def build_and_route(
    data: ExperimentData,
    gates: GateSet,
    routers: Sequence[str],
    pilots_k: int | None = None,
) -> RouterArtifacts:
    """Train the requested routers on the prefix's gate set and route all
    test queries. Score tables are reused from the data cache."""
    config = data.config
    seed = config.seed
    k = config.pilots_k if pilots_k is None else pilots_k
    train_records = data.train_records()
    test_records = data.test_records()
    test_ids = [r.query_id for r in test_records]
    train_table = {g: data.train_scores(g) for g in gates}
    assignments = assign_max_gates(
        train_records,
        {g: data.gate_embs[g] for g in gates},
        data.corpus,
        data.qrels,
        config.metric,
        gate_set=gates,
        score_table=train_table,
    )
    library = build_pilot_library(
        assignments,
        data.base,
        gates,
        k=k,
        seed=seed,
        metric=config.metric,
        include_tied=config.include_tied_pilots,
    )
    notes: list[str] = []
    decisions: dict[str, list[RoutingDecision]] = {}
    test_matrix = data.base_matrix(test_records)

    if "pilot" in routers:
        decisions["pilot"] = route_pilot_batch(test_matrix, test_ids, library)
    if "dataset" in routers:
        routable = {ds: g for ds, g in data.dataset_to_gate.items() if g in gates}
        sampled_from = [r for r in train_records if r.source_dataset in routable]
        if sampled_from:
            index = build_dataset_sample_index(
                sampled_from,
                data.base,
                routable,
                gates,
                n=config.dataset_samples,
                seed=seed,
                metric=config.metric,
            )
            decisions["dataset"] = route_dataset_batch(test_matrix, test_ids, index)
        else:
            only = list(gates)[0]
            notes.append(f"dataset router fell back to constant gate {only}: no routable dataset")
            decisions["dataset"] = _constant_decisions(test_ids, only, "dataset")

    needs_classifiers = [r for r in ("head", "expert") if r in routers]
    if needs_classifiers:
        untied = [a for a in assignments if not a.tied]
        labels = [a.max_gate for a in untied]
        distinct = sorted(set(labels))
        if len(distinct) < 2:
            # Degenerate training data (single gate or one gate wins everywhere):
            # routing is vacuous, so emit constant decisions instead of failing.
            only = distinct[0] if distinct else list(gates)[0]
            for kind in needs_classifiers:
                notes.append(f"{kind} router fell back to constant gate {only}: single class")
                decisions[kind] = _constant_decisions(test_ids, only, kind)
        else:
            feats = np.stack([data.base.get(a.query_id) for a in untied]).astype(np.float64)
            params = TrainParams(seed=seed)
            if "head" in needs_classifiers:
                head = train_head_router(feats, labels, params, gate_order=gates)
                decisions["head"] = route_head_batch(test_matrix, test_ids, head)
            if "expert" in needs_classifiers:
                experts = train_expert_classifiers(feats, labels, params, gate_order=gates)
                decisions["expert"] = route_expert_classifier_batch(test_matrix, test_ids, experts)
    return RouterArtifacts(
        library=library, assignments=assignments, decisions=decisions, notes=notes
    )


def _dataset_means(
    data: ExperimentData, gates: GateSet, per_query: Mapping[str, float]
) -> dict[str, float]:
    out = {}
    for ds, recs in data.test.items():
        out[ds] = float(np.mean([per_query[r.query_id] for r in recs])) if recs else 0.0
    return out


@dataclass
class ResultsTable:
    """router x dataset grid of mean nDCG@10 plus a macro-average column."""

    datasets: list[str]
    rows: dict[str, dict[str, float]]
    averages: dict[str, float]
    gate_set: GateSet
    provenance: dict

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["router", *self.datasets, "avg"])
            for name, per_ds in self.rows.items():
                writer.writerow(
                    [name, *(repr(per_ds[ds]) for ds in self.datasets), repr(self.averages[name])]
                )


@dataclass
class ExperimentResult:
    results: ResultsTable
    selection_rows: list[dict]  # router, dataset, one rate per gate
    max_gate_rows: list[dict]  # dataset, one rate per gate, tie count
    decisions: dict[str, list[RoutingDecision]]
    achieved: dict[str, dict[str, float]]  # router -> query_id -> realized score
    library: PilotLibrary
    assignments: list[MaxGateAssignment]
    diagnostics: dict
    notes: list[str]


def _selection_rows(
    data: ExperimentData, gates: GateSet, decisions: Mapping[str, Sequence[RoutingDecision]]
) -> list[dict]:
    rows = []
    for router, decs in decisions.items():
        by_query = {d.query_id: d for d in decs}
        for ds, recs in data.test.items():
            if not recs:
                continue
            counts = {g: 0 for g in gates}
            for r in recs:
                counts[by_query[r.query_id].selected] += 1
            total = len(recs)
            rows.append(
                {"router": router, "dataset": ds, **{g: counts[g] / total for g in gates}}
            )
    return rows


def _max_gate_rows(data: ExperimentData, gates: GateSet) -> list[dict]:
    """Share of test instances per dataset on which each gate is the untied
    best performer; ties are counted separately."""
    rows = []
    test_table = {g: data.test_scores(g) for g in gates}
    for ds, recs in data.test.items():
        if not recs:
            continue
        counts = {g: 0 for g in gates}
        ties = 0
        for r in recs:
            scores = {g: test_table[g][r.query_id] for g in gates}
            winner, tied = select_max_gate(scores, gates, tol=TIE_TOL)
            if tied:
                ties += 1
            else:
                counts[winner] += 1
        untied_total = len(recs) - ties
        rates = {
            g: (counts[g] / untied_total if untied_total else 0.0) for g in gates
        }
        rows.append({"dataset": ds, **rates, "ties": ties})
    return rows


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None) -> ExperimentResult:
    data = ExperimentData(config)
    return run_experiment_on(data, out_dir)


def run_experiment_on(
    data: ExperimentData, out_dir: str | Path | None = None
) -> ExperimentResult:
    config = data.config
    gates = data.gate_set
    test_records = data.test_records()
    if not test_records:
        raise ValueError("no test queries in the dataset manifest")
    test_ids = [r.query_id for r in test_records]
    artifacts = build_and_route(data, gates, config.routers)
    test_table = {g: data.test_scores(g) for g in gates}

    rows: dict[str, dict[str, float]] = {}
    averages: dict[str, float] = {}
    achieved: dict[str, dict[str, float]] = {}
    diagnostics: dict = {"per_router": {}}

    def add_row(name: str, per_query: Mapping[str, float]):
        per_ds = _dataset_means(data, gates, per_query)
        rows[name] = per_ds
        averages[name] = float(np.mean(list(per_ds.values())))

    for router, decs in artifacts.decisions.items():
        realized = {d.query_id: test_table[d.selected][d.query_id] for d in decs}
        achieved[router] = realized
        add_row(router, realized)
        n = len(decs)
        diagnostics["per_router"][router] = {
            "queries": n,
            "routing_passes": n,  # one base-encoder embedding per routed query
            "retrieval_passes": n,  # one selected-gate embedding per routed query
            "passes_per_query": 2.0 if n else 0.0,
        }

    oracle_scores = {
        qid: max(test_table[g][qid] for g in gates) for qid in test_ids
    }
    add_row(ORACLE_ROW, oracle_scores)

    best_ind_scores: dict[str, float] = {}
    for ds, recs in data.test.items():
        if not recs:
            continue
        per_gate_mean = {
            g: float(np.mean([test_table[g][r.query_id] for r in recs])) for g in gates
        }
        best_gate, _ = select_max_gate(per_gate_mean, gates, tol=0.0)
        for r in recs:
            best_ind_scores[r.query_id] = test_table[best_gate][r.query_id]
    add_row(BEST_INDIVIDUAL_ROW, best_ind_scores)

    add_row(BASE_ROW, data.base_test_scores())
    for g in gates:
        add_row(g, test_table[g])

    results = ResultsTable(
        datasets=data.datasets,
        rows=rows,
        averages=averages,
        gate_set=gates,
        provenance={"config_hash": data.config.fingerprint(), "seed": config.seed},
    )
    result = ExperimentResult(
        results=results,
        selection_rows=_selection_rows(data, gates, artifacts.decisions),
        max_gate_rows=_max_gate_rows(data, gates),
        decisions=artifacts.decisions,
        achieved=achieved,
        library=artifacts.library,
        assignments=artifacts.assignments,
        diagnostics=diagnostics,
        notes=artifacts.notes,
    )
    if out_dir is not None:
        write_experiment_outputs(result, data, Path(out_dir))
    return result


def write_routes_csv(
    decisions: Mapping[str, Sequence[RoutingDecision]], gates: Sequence[str], path: str | Path
) -> None:
    """``query_id,router,selected_gate,<score per gate>``; unscored gates blank."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "router", "selected_gate", *gates])
        for router, decs in decisions.items():
            for d in decs:
                cells = [
                    repr(d.per_gate_score[g]) if g in d.per_gate_score else "" for g in gates
                ]
                writer.writerow([d.query_id, router, d.selected, *cells])


def write_experiment_outputs(result: ExperimentResult, data: ExperimentData, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    gates = list(data.gate_set)
    result.results.to_csv(out / "results.csv")
    write_routes_csv(result.decisions, gates, out / "routes.csv")

    with open(out / "selection_matrix.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["router", "dataset", *gates])
        for row in result.selection_rows:
            writer.writerow([row["router"], row["dataset"], *(repr(row[g]) for g in gates)])

    with open(out / "max_gate_matrix.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", *gates, "ties"])
        for row in result.max_gate_rows:
            writer.writerow([row["dataset"], *(repr(row[g]) for g in gates), row["ties"]])

    save_library(result.library, out / "pilots.json")
    write_assignments_csv(result.assignments, data.gate_set, out / "assignments.csv")
    meta = {
        "config_hash": result.results.provenance["config_hash"],
        "seed": data.config.seed,
        "metric": data.config.metric,
        "k": data.config.pilots_k,
        "gates": gates,
        "routers": list(result.decisions),
        "datasets": data.datasets,
        "diagnostics": result.diagnostics,
        "notes": result.notes,
    }
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")


def ablate_gates(
    config: ExperimentConfig,
    gate_order: Sequence[str],
    out_dir: str | Path | None = None,
    data: ExperimentData | None = None,
) -> list[dict]:
    """Curve of macro-average nDCG@10 versus gate-set prefix size.

    For each prefix of ``gate_order``, the pilot library and every requested
    router are rebuilt from scratch restricted to the prefix; the oracle row
    is always included. Evaluation always covers every dataset.
    """
    if not gate_order:
        raise ValueError("empty gate order")
    if len(set(gate_order)) != len(gate_order):
        raise ValueError("gate order has duplicates")
    if data is None:
        data = ExperimentData(config)
    rows: list[dict] = []
    for size in range(1, len(gate_order) + 1):
        subset = data.gate_set.restrict(gate_order[:size])
        artifacts = build_and_route(data, subset, config.routers)
        test_table = {g: data.test_scores(g) for g in subset}
        means: dict[str, float] = {}
        for router, decs in artifacts.decisions.items():
            realized = {d.query_id: test_table[d.selected][d.query_id] for d in decs}
            means[router] = float(np.mean(list(_dataset_means(data, subset, realized).values())))
        oracle = {
            r.query_id: max(test_table[g][r.query_id] for g in subset)
            for r in data.test_records()
        }
        means[ORACLE_ROW] = float(np.mean(list(_dataset_means(data, subset, oracle).values())))
        for router, mean in means.items():
            rows.append(
                {
                    "gate_count": size,
                    "gates": "+".join(subset),
                    "router": router,
                    "mean_ndcg": mean,
                }
            )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablate_gates.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["gate_count", "gates", "router", "mean_ndcg"])
            for row in rows:
                writer.writerow(
                    [row["gate_count"], row["gates"], row["router"], repr(row["mean_ndcg"])]
                )
    return rows


def ablate_pilots(
    config: ExperimentConfig,
    ks: Sequence[int],
    out_dir: str | Path | None = None,
    data: ExperimentData | None = None,
) -> list[dict]:
    """Pilot-router macro-average nDCG@10 as the per-group cluster count varies."""
    if not ks or any(k < 1 for k in ks):
        raise ValueError("ks must be a non-empty list of integers >= 1")
    if data is None:
        data = ExperimentData(config)
    gates = data.gate_set
    test_table = {g: data.test_scores(g) for g in gates}
    rows = []
    for k in ks:
        artifacts = build_and_route(data, gates, ["pilot"], pilots_k=k)
        decs = artifacts.decisions["pilot"]
        realized = {d.query_id: test_table[d.selected][d.query_id] for d in decs}
        mean = float(np.mean(list(_dataset_means(data, gates, realized).values())))
        rows.append({"k": k, "entries": len(artifacts.library), "mean_ndcg": mean})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablate_pilots.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "entries", "mean_ndcg"])
            for row in rows:
                writer.writerow([row["k"], row["entries"], repr(row["mean_ndcg"])])
    return rows
