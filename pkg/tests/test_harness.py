import csv
import filecmp
import json
import subprocess
import sys

import numpy as np
import pytest

from gatepilot.core import load_embedding_set, save_embedding_set, EmbeddingSet
from gatepilot.harness import (
    ExperimentConfig,
    ExperimentData,
    ablate_gates,
    ablate_pilots,
    run_experiment,
    run_experiment_on,
)
from gatepilot.metrics import batch_instance_scores
from gatepilot.synth import SynthConfig, generate_world


def run_cli(*argv, env=None):
    import os

    full_env = dict(os.environ)
    if env:
        full_env.update(env)
    return subprocess.run(
        [sys.executable, "-m", "gatepilot.cli", *argv],
        capture_output=True,
        text=True,
        env=full_env,
    )


class TestRunExperiment:
    def test_single_gate_single_dataset_vacuous(self, tmp_path):
        d = tmp_path / "w"
        generate_world(
            SynthConfig(num_domains=1, dim=16, docs_per_domain=30,
                        train_queries_per_domain=15, test_queries_per_domain=10)
        ).save(d)
        result = run_experiment(ExperimentConfig.for_world_dir(d))
        means = {r: result.results.averages[r] for r in ("pilot", "dataset", "head", "expert")}
        assert len(set(means.values())) == 1
        assert all(d_.selected == "G0" for decs in result.decisions.values() for d_ in decs)

    def test_rerun_byte_identical(self, small_world_dir, tmp_path):
        config = ExperimentConfig.for_world_dir(small_world_dir)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        run_experiment(config, out_dir=out1)
        run_experiment(config, out_dir=out2)
        names = [
            "results.csv", "routes.csv", "selection_matrix.csv",
            "max_gate_matrix.csv", "assignments.csv", "pilots.json", "meta.json",
        ]
        match, mismatch, errors = filecmp.cmpfiles(out1, out2, names, shallow=False)
        assert mismatch == [] and errors == []

    def test_selection_matrix_rows_sum_to_one(self, default_experiment):
        gates = list(default_experiment.data.gate_set)
        for row in default_experiment.result.selection_rows:
            assert sum(row[g] for g in gates) == pytest.approx(1.0, abs=1e-9)

    def test_max_gate_rows_sum_to_one_excluding_ties(self, default_experiment):
        gates = list(default_experiment.data.gate_set)
        for row in default_experiment.result.max_gate_rows:
            assert sum(row[g] for g in gates) == pytest.approx(1.0, abs=1e-9)
            assert row["ties"] >= 0

    def test_two_passes_per_routed_query(self, default_experiment):
        for router, stats in default_experiment.result.diagnostics["per_router"].items():
            assert stats["routing_passes"] == stats["queries"]
            assert stats["retrieval_passes"] == stats["queries"]
            assert stats["routing_passes"] + stats["retrieval_passes"] == 2 * stats["queries"]

    def test_results_recomputable_from_routes_csv(self, default_experiment):
        """Auditability: replaying routes.csv against the embeddings + qrels
        reproduces every ResultsTable cell."""
        data = default_experiment.data
        with open(default_experiment.out / "routes.csv", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        selected = {}
        for row in rows:
            selected.setdefault(row["router"], {})[row["query_id"]] = row["selected_gate"]
        for router, by_query in selected.items():
            realized = {}
            for gate in data.gate_set:
                qids = [q for q, g in by_query.items() if g == gate]
                if not qids:
                    continue
                realized.update(
                    batch_instance_scores(
                        qids, data.gate_embs[gate], data.corpus, data.qrels
                    )
                )
            for ds, recs in data.test.items():
                mean = float(np.mean([realized[r.query_id] for r in recs]))
                assert mean == pytest.approx(
                    default_experiment.result.results.rows[router][ds], abs=1e-12
                )

    def test_missing_gate_embedding_fails_fast(self, small_world_dir, tmp_path):
        crippled = load_embedding_set(small_world_dir / "gate_G1_queries.emb")
        keep = [i for i, qid in enumerate(crippled.ids) if qid != "D1-test-0"]
        save_embedding_set(
            EmbeddingSet(
                [crippled.ids[i] for i in keep],
                crippled.matrix[keep],
                provider=crippled.provider,
            ),
            small_world_dir / "gate_G1_queries.emb",
            "bin",
        )
        config = ExperimentConfig.for_world_dir(small_world_dir)
        with pytest.raises(KeyError, match="D1-test-0"):
            run_experiment(config)

    def test_reference_rows_present(self, default_experiment):
        rows = default_experiment.result.results.rows
        for name in ("pilot", "dataset", "head", "expert", "oracle", "best-individual", "base",
                     "G0", "G1", "G2", "G3"):
            assert name in rows

    def test_best_individual_sandwich(self, default_experiment):
        # per dataset: single-gate means <= best-individual <= oracle, and the
        # pilot router lands between the worst single gate and the oracle
        rows = default_experiment.result.results.rows
        gates = list(default_experiment.data.gate_set)
        for ds in default_experiment.data.datasets:
            gate_means = [rows[g][ds] for g in gates]
            assert rows["best-individual"][ds] == pytest.approx(max(gate_means), abs=1e-12)
            assert rows["best-individual"][ds] <= rows["oracle"][ds] + 1e-12
            assert min(gate_means) - 1e-12 <= rows["pilot"][ds] <= rows["oracle"][ds] + 1e-12

    def test_oracle_dominates_per_dataset(self, default_experiment):
        rows = default_experiment.result.results.rows
        for router in ("pilot", "dataset", "head", "expert", "best-individual", "base"):
            for ds in default_experiment.data.datasets:
                assert rows[router][ds] <= rows["oracle"][ds] + 1e-12

    def test_dim_disagreement_rejected(self, small_world_dir):
        bad = EmbeddingSet(["x"], np.zeros((1, 7), dtype=np.float32))
        save_embedding_set(bad, small_world_dir / "base_queries.emb", "bin")
        with pytest.raises(ValueError, match="dim"):
            ExperimentData(ExperimentConfig.for_world_dir(small_world_dir))


class TestAblations:
    @pytest.fixture()
    def data(self, small_world_dir):
        return ExperimentData(ExperimentConfig.for_world_dir(small_world_dir))

    def test_full_prefix_matches_run_experiment(self, data):
        result = run_experiment_on(data)
        rows = ablate_gates(data.config, list(data.gate_set), data=data)
        final = {r["router"]: r["mean_ndcg"] for r in rows if r["gate_count"] == 3}
        for router in ("pilot", "dataset", "head", "expert", "oracle"):
            assert final[router] == pytest.approx(result.results.averages[router], abs=1e-12)

    def test_orders_share_final_point(self, data):
        a = ablate_gates(data.config, ["G0", "G1", "G2"], data=data)
        b = ablate_gates(data.config, ["G2", "G0", "G1"], data=data)
        final_a = {r["router"]: r["mean_ndcg"] for r in a if r["gate_count"] == 3}
        final_b = {r["router"]: r["mean_ndcg"] for r in b if r["gate_count"] == 3}
        assert final_a == final_b

    def test_oracle_curve_non_decreasing_all_orders(self, data):
        from itertools import permutations

        for order in permutations(data.gate_set):
            rows = ablate_gates(data.config, list(order), data=data)
            oracle = [r["mean_ndcg"] for r in rows if r["router"] == "oracle"]
            assert all(b >= a - 1e-12 for a, b in zip(oracle, oracle[1:])), order

    def test_empty_order_rejected(self, data):
        with pytest.raises(ValueError, match="empty"):
            ablate_gates(data.config, [], data=data)

    def test_pilot_k1_matches_experiment(self, data):
        result = run_experiment_on(data)
        rows = ablate_pilots(data.config, [1], data=data)
        assert rows[0]["mean_ndcg"] == pytest.approx(
            result.results.averages["pilot"], abs=1e-12
        )

    def test_huge_k_gives_one_pilot_per_instance(self, data):
        rows = ablate_pilots(data.config, [10_000], data=data)
        assert rows[0]["entries"] == len(data.train_records())

    def test_curve_reproducible(self, data, small_world_dir):
        fresh = ExperimentData(ExperimentConfig.for_world_dir(small_world_dir))
        a = ablate_pilots(data.config, [1, 2, 4], data=data)
        b = ablate_pilots(fresh.config, [1, 2, 4], data=fresh)
        assert a == b


class TestCli:
    def test_eval_prints_four_decimals(self, small_world_dir, tmp_path):
        run_path = tmp_path / "run.trec"
        got = run_cli(
            "retrieve", "--queries", str(small_world_dir / "gate_G0_queries.emb"),
            "--corpus", str(small_world_dir / "corpus.emb"), "--out", str(run_path),
        )
        assert got.returncode == 0, got.stderr
        got = run_cli(
            "eval", "--run", str(run_path), "--qrels", str(small_world_dir / "qrels.txt"),
            "--metric", "ndcg@10",
        )
        assert got.returncode == 0, got.stderr
        value = got.stdout.strip().split("=")[1]
        assert len(value.split(".")[1]) == 4

    def test_experiment_writes_contracted_files(self, small_world_dir, tmp_path):
        exp = {
            "corpus": "corpus.emb",
            "base_queries": "base_queries.emb",
            "gate_queries": {g: f"gate_{g}_queries.emb" for g in ("G0", "G1", "G2")},
            "qrels": "qrels.txt",
            "datasets": "datasets.json",
            "gates": ["G0", "G1", "G2"],
        }
        config_path = small_world_dir / "exp.json"
        config_path.write_text(json.dumps(exp))
        out = tmp_path / "results"
        got = run_cli("experiment", "--config", str(config_path), "--out", str(out))
        assert got.returncode == 0, got.stderr
        for name in ("results.csv", "routes.csv", "selection_matrix.csv", "max_gate_matrix.csv"):
            assert (out / name).exists(), name

    def test_build_library_worked_example_bound(self, small_world_dir, tmp_path):
        # 3-gate world: the library can have at most 9 entries with k=1
        out = tmp_path / "pilots.json"
        got = run_cli("build-library", "--world", str(small_world_dir), "--k", "1",
                      "--out", str(out))
        assert got.returncode == 0, got.stderr
        library = json.loads(out.read_text())
        assert len(library["entries"]) <= 9

    def test_unknown_flag_exits_one_with_usage(self):
        got = run_cli("eval", "--bogus")
        assert got.returncode == 1
        assert "usage" in got.stderr.lower()

    def test_rr_seed_env_override(self, tmp_path):
        out = tmp_path / "w"
        got = run_cli(
            "synth", "--out", str(out), "--domains", "1", "--dim", "8", "--docs", "2",
            "--train", "1", "--test", "1", env={"RR_SEED": "77"},
        )
        assert got.returncode == 0, got.stderr
        assert json.loads((out / "synth.json").read_text())["seed"] == 77

    def test_validation_error_exit_code(self, tmp_path):
        got = run_cli("eval", "--run", str(tmp_path / "missing.trec"),
                      "--qrels", str(tmp_path / "missing.txt"))
        assert got.returncode == 2  # missing file is an I/O error
