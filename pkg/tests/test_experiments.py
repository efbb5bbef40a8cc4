"""Experiment harness: worlds, studies, report tables, bench, report I/O."""

from __future__ import annotations

import dataclasses
import json

import numpy as np
import pytest

from wmkit.errors import ConfigError, DataError, UsageError
from wmkit.experiments import (
    BenchConfig,
    Condition,
    EXP_TIERS,
    ExperimentConfig,
    KGW_TIERS,
    build_world,
    canonical_json,
    derive_key,
    evaluator_report,
    load_report,
    perplexity,
    replay_fingerprint,
    run_bench,
    run_calibration,
    run_robustness,
    run_tradeoff,
    scheme_conditions,
    strip_timing,
    validate_report,
    write_report,
)
from wmkit.schemes import EXP, KGW, UNIGRAM

SMALL = ExperimentConfig(n_label=60, n_eval=8, n_robust=8, max_new=16, epochs=8)


@pytest.fixture(scope="module")
def small_world():
    """A fast world for structural checks; signal strength is not asserted."""
    return build_world(SMALL)


@pytest.fixture(scope="module")
def tradeoff_report(small_world):
    return run_tradeoff(small_world)


@pytest.fixture(scope="module")
def robustness_report(small_world):
    return validate_report(run_robustness(small_world, reps=2))


@pytest.fixture(scope="module")
def bench_report():
    config = BenchConfig(
        vocab_size=64, d_model=32, n_layers=2, n_heads=4,
        prefix_len=64, new_tokens=8, reps=3, warmup=1,
    )
    return validate_report(run_bench(config))


class TestKeyAndConfig:
    def test_derive_key(self):
        assert derive_key(0) == derive_key(0)
        assert len(derive_key(0)) == 16
        assert derive_key(0) != derive_key(1)

    def test_config_round_trip(self):
        config = ExperimentConfig(seed=7, theta_grid=(0.4, 0.6))
        data = config.to_dict()
        assert data["key_hex"] == derive_key(7).hex()
        assert ExperimentConfig.from_dict(data) == config
        assert ExperimentConfig.from_dict(json.loads(json.dumps(data))) == config

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"vocab_sized": 64})

    def test_validation(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(backend="rnn")
        with pytest.raises(ConfigError):
            ExperimentConfig(n_eval=1)
        with pytest.raises(ConfigError):
            ExperimentConfig(max_new=4)
        with pytest.raises(ConfigError):
            ExperimentConfig(reps=0)
        with pytest.raises(ConfigError):
            ExperimentConfig(label_holdout=1.0)


class TestWorldAndStudy:
    def test_world_structure(self, small_world):
        assert small_world.config == SMALL
        assert small_world.vocab.size == 64
        assert small_world.model.vocab_size == 64
        study = small_world.study
        assert {r["evaluator"] for r in study.rows} == {
            "nn-contextual", "nn-isolated", "entropy", "logit-delta",
        }
        assert study.n_train + study.n_held >= 20
        total = study.n_train + study.n_held
        assert study.n_held == round(0.25 * total)

    def test_f1_lookup(self, small_world):
        study = small_world.study
        assert study.f1_of("entropy") == next(
            r["best_f1"] for r in study.rows if r["evaluator"] == "entropy"
        )
        with pytest.raises(UsageError):
            study.f1_of("oracle")

    def test_gate_is_flipped_contextual(self, small_world):
        from wmkit.capacity import evaluate_capacity

        study = small_world.study
        rng = np.random.default_rng(0)
        window = rng.random(study.top_m * 3)
        raw = evaluate_capacity(study.contextual.params, window)
        flipped = evaluate_capacity(study.gate, window)
        assert flipped == pytest.approx(1.0 - raw, abs=1e-9)

    def test_evaluator_report_margins(self, small_world):
        report = validate_report(evaluator_report(small_world))
        assert report["kind"] == "evaluator-study"
        f1 = {r["evaluator"]: r["best_f1"] for r in report["rows"]}
        summary = report["summary"]
        assert summary["margin_over_entropy"] == pytest.approx(
            f1["nn-contextual"] - f1["entropy"]
        )
        assert summary["margin_over_isolated"] == pytest.approx(
            f1["nn-contextual"] - f1["nn-isolated"]
        )


class TestConditions:
    def test_kgw_grid(self):
        conds = scheme_conditions(SMALL, KGW)
        names = [c.name for c in conds]
        assert names[:3] == ["kgw-plain-soft", "kgw-plain-mid", "kgw-plain-hard"]
        assert len(conds) == 3 + len(SMALL.theta_grid) + len(SMALL.entropy_grid)
        assert [c.delta for c in conds[:3]] == [1.0, 2.0, 4.0]
        for cond in conds[3:]:
            assert cond.tier == "hard"
            assert cond.delta == 4.0

    def test_exp_grid_uses_top_k_tiers(self):
        conds = scheme_conditions(SMALL, EXP)
        plain = [c for c in conds if c.mode == "plain"]
        assert [c.top_k for c in plain] == [2, 4, 8]
        assert all(c.delta == 0.0 for c in conds)
        caw = [c for c in conds if c.mode == "caw"]
        assert [c.theta for c in caw] == list(SMALL.theta_grid)
        assert all(c.top_k == 8 for c in caw)

    def test_tier_tables(self):
        assert KGW_TIERS == (("soft", 1.0), ("mid", 2.0), ("hard", 4.0))
        assert EXP_TIERS == (("soft", 2), ("mid", 4), ("hard", 8))


class TestTradeoff:
    def test_row_table_shape(self, tradeoff_report):
        # greedy + null + 3 variants x (3 plain + 3 caw + 5 entropy)
        report = tradeoff_report
        assert len(report["rows"]) == 2 + 3 * 11
        for row in report["rows"]:
            assert 0.0 <= row["accuracy"] <= 1.0
            assert 0.0 <= row["auroc"] <= 1.0
            assert row["ppl"] > 0.0
            assert len(row["per_rep_accuracy"]) == SMALL.reps

    def test_pair_and_pareto_tables(self, tradeoff_report):
        report = tradeoff_report
        assert len(report["matched_pairs"]) == 9  # 3 caw thetas x 3 variants
        for pair in report["matched_pairs"]:
            assert pair["auroc_gap"] == pytest.approx(
                abs(pair["caw_auroc"] - pair["entropy_auroc"])
            )
            assert pair["matched"] == (pair["auroc_gap"] <= SMALL.match_tol)
        assert len(report["pareto"]) == 9
        for entry in report["pareto"]:
            assert isinstance(entry["dominated_by"], list)

    def test_summary_consistency(self, tradeoff_report):
        report = tradeoff_report
        by_name = {r["condition"]: r for r in report["rows"]}
        summary = report["summary"]
        assert summary["greedy_accuracy"] == by_name["greedy"]["accuracy"]
        assert summary["kgw_hard_auroc"] == by_name["kgw-plain-hard"]["auroc"]
        assert summary["matched_pairs"] == sum(
            1 for p in report["matched_pairs"] if p["matched"]
        )
        diss = summary["quality_dissociation"]
        assert diss["accuracy_drop"] == pytest.approx(
            by_name["greedy"]["accuracy"] - by_name["kgw-plain-hard"]["accuracy"]
        )
        assert diss["ppl_ratio"] == pytest.approx(
            by_name["kgw-plain-hard"]["ppl"] / by_name["greedy"]["ppl"]
        )

    def test_passes_validation_and_round_trips(self, tradeoff_report, tmp_path):
        report = tradeoff_report
        validate_report(report)
        paths = write_report(report, tmp_path, "tradeoff")
        loaded = load_report(paths["json"])
        assert replay_fingerprint(loaded) == replay_fingerprint(report)
        assert paths["csv"].read_text().startswith("condition,")

    def test_custom_condition_subset(self, small_world):
        conds = [
            Condition(name="greedy", mode="greedy"),
            Condition(name="null-sampled", mode="null"),
            Condition(name="kgw-plain-hard", mode="plain", variant=KGW, tier="hard", delta=4.0),
        ]
        report = run_tradeoff(small_world, conditions=conds)
        assert [r["condition"] for r in report["rows"]] == [c.name for c in conds]


class TestCalibration:
    def test_structure_and_direction(self, small_world):
        report = validate_report(run_calibration(small_world, n_class=12, n_null=16, horizon=40))
        assert [r["row"] for r in report["rows"]] == ["hard-vs-null", "off-vs-null"]
        summary = report["summary"]
        assert summary["hard_auroc"] > summary["off_auroc"]
        assert 0.0 <= summary["null_fpr_at_4"] <= 1.0
        assert summary["null_fpr_n"] == 16

    def test_sample_size_guard(self, small_world):
        with pytest.raises(UsageError):
            run_calibration(small_world, n_class=1, n_null=10)
        with pytest.raises(UsageError):
            run_calibration(small_world, n_class=20, n_null=10)


class TestRobustness:
    def test_row_table_shape(self, robustness_report):
        rows = robustness_report["rows"]
        assert len(rows) == 2 * 2 * 3  # {kgw,exp} x {plain,caw} x three attacks
        for row in rows:
            assert len(row["per_rep_loss"]) == 2
            assert row["auroc_loss"] == pytest.approx(
                row["auroc_clean"] - row["auroc_attacked"]
            )

    def test_pairs_cover_grid(self, robustness_report):
        report = robustness_report
        pairs = report["pairs"]
        assert {(p["variant"], p["attack"]) for p in pairs} == {
            (v, a) for v in (KGW, EXP) for a in ("word-s", "word-d", "word-s-context")
        }
        for pair in pairs:
            assert pair["loss_gap"] == pytest.approx(
                abs(pair["caw_loss"] - pair["plain_loss"])
            )
        assert report["summary"]["max_loss_gap"] == pytest.approx(
            max(p["loss_gap"] for p in pairs)
        )

    def test_findings_mention_both_schemes(self, robustness_report):
        text = " ".join(robustness_report["findings"])
        assert "kgw" in text and "exp" in text

    def test_reps_guard(self, small_world):
        with pytest.raises(UsageError):
            run_robustness(small_world, reps=0)


class TestPerplexity:
    def test_matches_hand_rolled_nll(self, ngram_model):
        prompt = [0, 15, 5, 11, 2, 13]
        completion = [7, 14, 16, 17]
        rows = np.asarray(ngram_model.sequence_logits(prompt + completion), dtype=np.float64)
        total = 0.0
        for offset, target in enumerate(completion):
            row = rows[len(prompt) - 1 + offset]
            log_probs = row - np.log(np.exp(row - row.max()).sum()) - row.max()
            total += -log_probs[target]
        expected = float(np.exp(total / len(completion)))
        assert perplexity(ngram_model, [prompt], [completion]) == pytest.approx(expected, rel=1e-9)

    def test_input_guard(self, ngram_model):
        with pytest.raises(UsageError):
            perplexity(ngram_model, [[1, 2]], [])


class TestBench:
    def test_counter_budget(self, bench_report):
        rows = {r["condition"]: r for r in bench_report["rows"]}
        assert set(rows) == {"greedy", "plain", "tree", "sequential", "batch"}
        assert rows["greedy"]["steps"] == 8 and rows["greedy"]["pregens"] == 0
        assert rows["tree"]["pregens"] == 8 and rows["tree"]["steps"] == 0
        assert rows["sequential"]["branch_forwards"] > 0
        assert rows["batch"]["alloc_mb"] > rows["tree"]["alloc_mb"]

    def test_timing_table(self, bench_report):
        timing = bench_report["timing"]
        for key in ("plain_ratio", "tree_ratio", "sequential_ratio", "batch_ratio"):
            assert timing[key] > 0.0
        assert timing["baseline_ms_per_token"] > 0.0
        conditions = [r["condition"] for r in timing["rows"]]
        assert conditions == ["greedy", "plain", "tree", "sequential", "batch"]

    def test_tree_beats_sequential_at_wide_fanout(self):
        # eight pregenerated branches per token: one eight-row pass should
        # cost clearly less than eight single-row passes
        config = BenchConfig(
            vocab_size=64, d_model=32, n_layers=2, n_heads=4,
            prefix_len=128, new_tokens=16, reps=5, warmup=2,
            variant=EXP, top_k=8,
        )
        timing = run_bench(config)["timing"]
        assert timing["tree_ratio"] < timing["sequential_ratio"]

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            BenchConfig(reps=2)
        with pytest.raises(ConfigError):
            BenchConfig(variant="kgw2")
        with pytest.raises(ConfigError):
            BenchConfig(variant=EXP, top_k=0)
        with pytest.raises(ConfigError):
            BenchConfig(variant=EXP, top_k=300)


class TestReportIO:
    def _tiny_report(self):
        return {
            "schema_version": 1,
            "kind": "bench",
            "config": {},
            "rows": [{"condition": "greedy", "values": [1, 2]}],
            "summary": {"x": np.float64(0.5), "n": np.int64(3)},
            "timing": {"wall_s": 1.23},
        }

    def test_canonical_json_coerces_numpy_and_bytes(self):
        s = canonical_json({"a": np.int32(2), "b": np.float32(0.5), "c": b"\x01", "d": np.arange(2)})
        assert json.loads(s) == {"a": 2, "b": 0.5, "c": "01", "d": [0, 1]}
        with pytest.raises(TypeError):
            canonical_json({"bad": object()})

    def test_strip_timing_recurses(self):
        obj = {"timing": 1, "a": [{"timing": 2, "keep": 3}], "b": {"timing": {}}}
        assert strip_timing(obj) == {"a": [{"keep": 3}], "b": {}}

    def test_fingerprint_ignores_timing_only(self):
        report = self._tiny_report()
        fp = replay_fingerprint(report)
        report["timing"]["wall_s"] = 99.0
        assert replay_fingerprint(report) == fp
        report["rows"][0]["values"] = [1, 3]
        assert replay_fingerprint(report) != fp

    def test_validate_report_errors(self):
        with pytest.raises(DataError):
            validate_report([])
        with pytest.raises(DataError):
            validate_report({"schema_version": 2, "kind": "bench", "rows": []})
        with pytest.raises(DataError):
            validate_report({"schema_version": 1, "kind": "magic", "rows": []})
        with pytest.raises(DataError):
            validate_report({"schema_version": 1, "kind": "bench"})

    def test_write_and_load_round_trip(self, tmp_path):
        report = self._tiny_report()
        paths = write_report(report, tmp_path, "tiny")
        assert paths["json"].exists() and paths["csv"].exists()
        loaded = load_report(paths["json"])
        assert replay_fingerprint(loaded) == replay_fingerprint(report)

    def test_load_errors(self, tmp_path):
        with pytest.raises(DataError):
            load_report(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(DataError):
            load_report(bad)


class TestFingerprintDeterminism:
    def test_rebuilt_world_reproduces_reports(self):
        config = ExperimentConfig(n_label=40, n_eval=8, n_robust=8, max_new=16, epochs=4)
        report_a = run_calibration(build_world(config), n_class=6, n_null=8, horizon=24)
        report_b = run_calibration(build_world(config), n_class=6, n_null=8, horizon=24)
        assert replay_fingerprint(report_a) == replay_fingerprint(report_b)

    def test_seed_changes_fingerprint(self):
        base = ExperimentConfig(n_label=40, n_eval=8, n_robust=8, max_new=16, epochs=4)
        other = dataclasses.replace(base, seed=13)
        report_a = run_calibration(build_world(base), n_class=6, n_null=8, horizon=24)
        report_b = run_calibration(build_world(other), n_class=6, n_null=8, horizon=24)
        assert replay_fingerprint(report_a) != replay_fingerprint(report_b)
