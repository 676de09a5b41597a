"""Command-line surface.

Subcommands: synth, build-library, route, retrieve, eval, experiment,
ablate, train-router. Exit codes: 0 success, 1 validation error, 2 I/O
error. The default seed is 10; the RR_SEED environment variable overrides it
and an explicit --seed flag wins over both.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from gatepilot.core import DataFormatError, Qrels, load_embedding_set
from gatepilot.harness import (
    ExperimentConfig,
    ablate_gates,
    ablate_pilots,
    run_experiment,
    write_routes_csv,
)
from gatepilot.metrics import RetrievalRun, evaluate_run, top_k
from gatepilot.pilots import (
    assign_max_gates,
    build_pilot_library,
    load_library,
    read_assignments_csv,
    save_library,
    write_assignments_csv,
)
from gatepilot.routers import (
    TrainParams,
    build_dataset_sample_index,
    load_classifier,
    load_expert_classifiers,
    load_sample_index,
    route_dataset_batch,
    route_expert_classifier_batch,
    route_head_batch,
    route_pilot_batch,
    save_classifier,
    save_expert_classifiers,
    save_sample_index,
    train_expert_classifiers,
    train_head_router,
)
from gatepilot.synth import SynthConfig, SynthWorld, generate_world


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def default_seed() -> int:
    return int(os.environ.get("RR_SEED", "10"))


def _parse_metric(token: str) -> tuple[str, int]:
    """CLI metric tokens look like ndcg@10; k is parseable but defaults to 10."""
    if "@" in token:
        name, _, k = token.partition("@")
    else:
        name, k = token, "10"
    if name != "ndcg":
        raise ValueError(f"unsupported metric {token!r}; expected ndcg@<k>")
    return name, int(k)


def _load_world(world_dir: str) -> SynthWorld:
    return SynthWorld.load(world_dir)


def _world_assignments(world: SynthWorld, metric: str):
    return assign_max_gates(
        world.all_train_records(),
        world.gate_queries,
        world.corpus,
        world.qrels,
        metric,
        gate_set=world.gate_set,
    )


def cmd_synth(args) -> int:
    if args.config:
        config = SynthConfig.from_json(args.config)
        if args.seed is not None:
            config = SynthConfig(**{**config.__dict__, "seed": args.seed})
    else:
        config = SynthConfig(
            seed=args.seed if args.seed is not None else default_seed(),
            num_domains=args.domains,
            dim=args.dim,
            docs_per_domain=args.docs,
            train_queries_per_domain=args.train,
            test_queries_per_domain=args.test,
            sigma_in=args.sigma_in,
            sigma_base=args.sigma_base,
            sigma_out=args.sigma_out,
            center_spread=args.spread,
        )
    world = generate_world(config)
    world.save(args.out)
    print(f"world written to {args.out}: {world.corpus.count} docs, "
          f"{world.base_queries.count} queries, {world.gate_set.size} gates")
    return 0


def cmd_build_library(args) -> int:
    world = _load_world(args.world)
    seed = args.seed if args.seed is not None else default_seed()
    assignments = _world_assignments(world, args.metric)
    library = build_pilot_library(
        assignments,
        world.base_queries,
        world.gate_set,
        k=args.k,
        seed=seed,
        metric=args.metric,
        include_tied=not args.exclude_tied,
    )
    save_library(library, args.out)
    if args.assignments:
        write_assignments_csv(assignments, world.gate_set, args.assignments)
    print(f"pilot library with {len(library)} entries written to {args.out}")
    return 0


def cmd_route(args) -> int:
    queries = load_embedding_set(args.queries)
    matrix = queries.matrix.astype(np.float64)
    qids = list(queries.ids)
    if args.router == "pilot":
        if not args.library:
            raise ValueError("--library is required for the pilot router")
        library = load_library(args.library)
        decisions = route_pilot_batch(matrix, qids, library)
        gates = list(library.gate_set)
    elif args.router == "dataset":
        if not args.samples:
            raise ValueError("--samples is required for the dataset router")
        index = load_sample_index(args.samples)
        decisions = route_dataset_batch(matrix, qids, index)
        gates = list(index.gate_set)
    elif args.router == "head":
        if not args.classifier:
            raise ValueError("--classifier is required for the head router")
        clf = load_classifier(args.classifier)
        decisions = route_head_batch(matrix, qids, clf)
        gates = list(clf.class_labels)
    elif args.router == "expert":
        if not args.classifier:
            raise ValueError("--classifier is required for the expert router")
        classifiers = load_expert_classifiers(args.classifier)
        decisions = route_expert_classifier_batch(matrix, qids, classifiers)
        gates = list(classifiers)
    else:
        raise ValueError(f"unknown router {args.router!r}")
    write_routes_csv({args.router: decisions}, gates, args.out)
    print(f"routed {len(decisions)} queries with {args.router} -> {args.out}")
    return 0


def cmd_retrieve(args) -> int:
    queries = load_embedding_set(args.queries)
    corpus = load_embedding_set(args.corpus)
    rankings = {
        qid: top_k(queries.get(qid), corpus, args.k, args.metric) for qid in queries.ids
    }
    run = RetrievalRun(rankings, tag=args.tag)
    run.save_trec(args.out)
    print(f"run with {len(run)} queries written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    _, k = _parse_metric(args.metric)
    run = RetrievalRun.load_trec(args.run)
    qrels = Qrels.load_trec(args.qrels)
    result = evaluate_run(run, qrels, k=k)
    print(f"ndcg@{k}={result.mean:.4f}")
    if result.skipped:
        print(f"skipped {result.skipped} unjudged queries", file=sys.stderr)
    return 0


def cmd_experiment(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        config.seed = args.seed
    result = run_experiment(config, out_dir=args.out)
    print(f"experiment outputs written to {args.out}")
    for name in result.results.rows:
        print(f"  {name}: avg={result.results.averages[name]:.4f}")
    return 0


def cmd_ablate(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.what == "gates":
        order = args.order.split(",") if args.order else list(config.gates)
        ablate_gates(config, order, out_dir=args.out)
        print(f"gate ablation over {order} written to {args.out}/ablate_gates.csv")
    else:
        ks = [int(v) for v in args.ks.split(",")] if args.ks else [1, 2, 4]
        ablate_pilots(config, ks, out_dir=args.out)
        print(f"pilot-count ablation over k={ks} written to {args.out}/ablate_pilots.csv")
    return 0


def cmd_train_router(args) -> int:
    world = _load_world(args.world)
    seed = args.seed if args.seed is not None else default_seed()
    if args.kind == "dataset":
        index = build_dataset_sample_index(
            world.all_train_records(),
            world.base_queries,
            world.dataset_to_gate,
            world.gate_set,
            n=args.samples,
            seed=seed,
            metric=args.metric,
        )
        save_sample_index(index, args.out)
        print(f"dataset sample index with {len(index)} samples written to {args.out}")
        return 0
    if args.assignments:
        assignments, _ = read_assignments_csv(args.assignments)
    else:
        assignments = _world_assignments(world, args.metric)
    untied = [a for a in assignments if not a.tied]
    feats = np.stack([world.base_queries.get(a.query_id) for a in untied]).astype(np.float64)
    labels = [a.max_gate for a in untied]
    params = TrainParams(seed=seed)
    if args.kind == "head":
        clf = train_head_router(feats, labels, params, gate_order=world.gate_set)
        save_classifier(clf, args.out)
        print(f"head router over classes {list(clf.class_labels)} written to {args.out}")
    else:
        classifiers = train_expert_classifiers(feats, labels, params, gate_order=world.gate_set)
        save_expert_classifiers(classifiers, args.out)
        print(f"expert classifiers for {list(classifiers)} written to {args.out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="gatepilot", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic world")
    p.add_argument("--config", help="synth.json config file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--domains", type=int, default=4)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--docs", type=int, default=500)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--test", type=int, default=100)
    p.add_argument("--sigma-in", type=float, default=0.1)
    p.add_argument("--sigma-base", type=float, default=0.35)
    p.add_argument("--sigma-out", type=float, default=0.8)
    p.add_argument("--spread", type=float, default=0.12)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-library", help="run the pilot-library construction")
    p.add_argument("--world", required=True, help="directory written by synth")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--metric", default="ip", choices=["ip", "cos"])
    p.add_argument("--exclude-tied", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--assignments", help="also write the assignments CSV here")
    p.set_defaults(func=cmd_build_library)

    p = sub.add_parser("route", help="route queries with a trained router")
    p.add_argument("--router", required=True, choices=["pilot", "dataset", "head", "expert"])
    p.add_argument("--queries", required=True, help="base-encoder query embeddings")
    p.add_argument("--library", help="pilots.json (pilot router)")
    p.add_argument("--samples", help="samples.json (dataset router)")
    p.add_argument("--classifier", help="classifier json (head/expert routers)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("retrieve", help="brute-force top-k retrieval to a TREC run")
    p.add_argument("--queries", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--metric", default="ip", choices=["ip", "cos"])
    p.add_argument("--tag", default="gatepilot")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", help="score a TREC run against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metric", default="ndcg@10")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="full router comparison run")
    p.add_argument("--config", required=True, help="exp.json")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("ablate", help="gate-count or pilot-count ablation")
    p.add_argument("--config", required=True, help="exp.json")
    p.add_argument("--what", required=True, choices=["gates", "pilots"])
    p.add_argument("--order", help="comma-separated gate order (gates ablation)")
    p.add_argument("--ks", help="comma-separated k values (pilots ablation)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("train-router", help="train a baseline router from a world")
    p.add_argument("--kind", required=True, choices=["head", "expert", "dataset"])
    p.add_argument("--world", required=True)
    p.add_argument("--assignments", help="reuse an assignments CSV instead of rescoring")
    p.add_argument("--samples", type=int, default=100, help="per-dataset samples (dataset kind)")
    p.add_argument("--metric", default="ip", choices=["ip", "cos"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_router)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataFormatError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
