"""Capacity evaluators: features, scoring, training, and the labeling oracle."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import fd_gradients, mlp_score_ref
from wmkit.capacity import (
    EPS,
    LabeledSample,
    TrainConfig,
    bce_gradients,
    bce_loss,
    best_threshold_f1,
    build_state_window,
    default_top_m,
    entropy_capacity,
    evaluate_capacity,
    evaluate_capacity_batch,
    evaluator_metrics,
    flip_evaluator,
    gen_labels,
    init_evaluator,
    load_evaluator,
    logit_delta_capacity,
    make_constant_evaluator,
    save_evaluator,
    top_segment,
    train_evaluator,
)
from wmkit.errors import DataError, TrainingError, UsageError


class TestFeatures:
    def test_default_top_m_caps_at_100(self):
        assert default_top_m(64) == 64
        assert default_top_m(256) == 100

    def test_top_segment_frozen(self):
        seg = top_segment(np.array([0.1, 0.6, 0.3]), 2)
        assert np.allclose(seg, [0.6, 0.3], atol=0)

    def test_top_segment_pads_with_zeros(self):
        seg = top_segment(np.array([0.7, 0.3]), 4)
        assert np.allclose(seg, [0.7, 0.3, 0.0, 0.0], atol=0)

    @given(raw=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30), top_m=st.integers(1, 12))
    def test_top_segment_sorted_and_sized(self, raw, top_m):
        seg = top_segment(np.asarray(raw), top_m)
        assert seg.shape == (top_m,)
        assert all(seg[i] >= seg[i + 1] for i in range(top_m - 1))
        assert float(seg.sum()) <= float(np.sum(raw)) + 1e-12

    def test_window_marks_missing_context_with_zeros(self):
        dist = np.array([0.5, 0.5])
        window = build_state_window([None, dist, dist], 3)
        assert np.allclose(window, [0, 0, 0, 0.5, 0.5, 0, 0.5, 0.5, 0])

    def test_window_rejects_empty(self):
        with pytest.raises(UsageError):
            build_state_window([], 3)
        with pytest.raises(UsageError):
            top_segment(np.array([0.5]), 0)
        with pytest.raises(UsageError):
            top_segment(np.ones((2, 2)), 2)


class TestScalarBaselines:
    def test_entropy_frozen(self):
        # H(0.9, 0.1) = 0.3250830, over ln 2 = 0.4689956
        assert entropy_capacity(np.array([0.9, 0.1])) == pytest.approx(0.4689956, abs=1e-6)

    def test_entropy_bounds(self):
        assert entropy_capacity(np.array([1.0, 0.0])) == EPS  # clamped floor
        assert entropy_capacity(np.ones(8) / 8) == 1.0 - EPS  # clamped ceiling

    def test_logit_delta_frozen(self):
        # top-2 logit gap of ln 2 exponentiates to 1/2
        score = logit_delta_capacity(np.array([math.log(2.0), 0.0, -5.0]))
        assert score == pytest.approx(0.5, abs=1e-12)

    def test_logit_delta_tie_saturates(self):
        assert logit_delta_capacity(np.array([2.0, 2.0, 0.0])) == 1.0 - EPS

    def test_validation(self):
        with pytest.raises(UsageError):
            entropy_capacity(np.array([1.0]))
        with pytest.raises(UsageError):
            logit_delta_capacity(np.array([1.0]))


class TestEvaluatorNetwork:
    def test_constant_evaluator_returns_value(self):
        params = make_constant_evaluator(6, 0.5)
        assert evaluate_capacity(params, np.zeros(6)) == 0.5
        assert evaluate_capacity(params, np.ones(6) * 3) == 0.5

    def test_constant_evaluator_arbitrary_level(self):
        params = make_constant_evaluator(4, 0.3)
        assert evaluate_capacity(params, np.ones(4)) == pytest.approx(0.3, abs=1e-12)

    def test_constant_evaluator_validation(self):
        with pytest.raises(UsageError):
            make_constant_evaluator(4, 0.0)
        with pytest.raises(UsageError):
            make_constant_evaluator(4, 1.0)

    def test_flip_is_exact_complement(self):
        rng = np.random.default_rng(0)
        params = init_evaluator(5, 8, 4, seed=1)
        flipped = flip_evaluator(params)
        for _ in range(20):
            w = rng.normal(size=5)
            assert evaluate_capacity(flipped, w) == pytest.approx(
                1.0 - evaluate_capacity(params, w), abs=1e-12
            )

    def test_forward_matches_loop_rebuild(self):
        rng = np.random.default_rng(2)
        params = init_evaluator(7, 6, 3, seed=3)
        for _ in range(10):
            w = rng.normal(size=7)
            assert evaluate_capacity(params, w) == pytest.approx(
                mlp_score_ref(params, w), abs=1e-12
            )

    def test_batch_matches_single(self):
        rng = np.random.default_rng(4)
        params = init_evaluator(6, 5, 4, seed=5)
        windows = rng.normal(size=(9, 6))
        batch = evaluate_capacity_batch(params, windows)
        for i in range(9):
            assert batch[i] == pytest.approx(evaluate_capacity(params, windows[i]), abs=1e-12)

    def test_scores_stay_in_open_interval(self):
        params = init_evaluator(3, 4, 4, seed=0)
        params.b3 = 1000.0  # drive the sigmoid to saturation
        score = evaluate_capacity(params, np.zeros(3))
        assert 0.0 < score < 1.0

    def test_window_shape_checked(self):
        params = init_evaluator(6, 4, 4, seed=0)
        with pytest.raises(UsageError):
            evaluate_capacity(params, np.zeros(5))

    def test_init_validation(self):
        with pytest.raises(UsageError):
            init_evaluator(0, 4, 4)


class TestGradients:
    def test_analytic_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        params = init_evaluator(6, 5, 4, seed=3)
        x = rng.normal(size=(7, 6))
        y = (rng.random(7) < 0.5).astype(np.float64)
        analytic = bce_gradients(params, x, y)
        numeric = fd_gradients(params, x, y)
        for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
            a = np.asarray(analytic[name])
            f = np.asarray(numeric[name])
            rel = np.max(np.abs(a - f) / np.maximum(np.abs(f), 1e-8))
            assert rel < 1e-4, f"{name}: rel err {rel}"

    def test_loss_decreases_along_gradient(self):
        rng = np.random.default_rng(7)
        params = init_evaluator(4, 4, 3, seed=1)
        x = rng.normal(size=(16, 4))
        y = (x[:, 0] > 0).astype(np.float64)
        before = bce_loss(params, x, y)
        grads = bce_gradients(params, x, y)
        for name in ("w1", "b1", "w2", "b2", "w3"):
            getattr(params, name)[...] -= 0.5 * grads[name]
        params.b3 -= 0.5 * grads["b3"]
        assert bce_loss(params, x, y) < before


class TestTraining:
    @staticmethod
    def _separable_dataset(n=80, seed=0):
        rng = np.random.default_rng(seed)
        samples = []
        for i in range(n):
            label = i % 2
            center = 1.0 if label == 1 else -1.0
            samples.append(LabeledSample(window=rng.normal(center, 0.3, size=4), label=label))
        return samples

    def test_deterministic(self):
        data = self._separable_dataset()
        config = TrainConfig(hidden1=8, hidden2=4, epochs=5, seed=3)
        a = train_evaluator(data, config)
        b = train_evaluator(data, config)
        assert np.array_equal(a.params.w1, b.params.w1)
        assert a.best_epoch == b.best_epoch

    def test_learns_separable_data(self):
        data = self._separable_dataset(n=120)
        result = train_evaluator(data, TrainConfig(hidden1=8, hidden2=4, epochs=25, seed=0))
        scores = evaluate_capacity_batch(result.params, np.stack([s.window for s in data]))
        labels = [s.label for s in data]
        f1, _ = best_threshold_f1(scores, labels)
        assert f1 > 0.9
        assert len(result.history) == 25

    def test_single_class_rejected(self):
        rng = np.random.default_rng(1)
        data = [LabeledSample(window=rng.normal(size=3), label=1) for _ in range(20)]
        with pytest.raises(TrainingError):
            train_evaluator(data)

    def test_empty_dataset_rejected(self):
        with pytest.raises(TrainingError):
            train_evaluator([])

    def test_bad_labels_rejected(self):
        data = [LabeledSample(window=np.zeros(3), label=2) for _ in range(4)]
        with pytest.raises(TrainingError):
            train_evaluator(data)


class TestMetrics:
    def test_frozen_confusion_counts(self):
        # 3 true positives, 1 false positive, 2 false negatives for the
        # critical class: precision 0.75, recall 0.6, F1 = 2/3.
        scores = np.array([0.1, 0.2, 0.3, 0.4, 0.9, 0.8, 0.95, 0.7])
        labels = np.array([0, 0, 0, 1, 0, 0, 1, 1])
        m = evaluator_metrics(scores, labels, threshold=0.5)
        assert m["precision"] == pytest.approx(0.75)
        assert m["recall"] == pytest.approx(0.6)
        assert m["f1"] == pytest.approx(2 / 3)

    def test_no_predictions_scores_zero(self):
        m = evaluator_metrics([0.9, 0.9], [0, 1], threshold=0.1)
        assert m == {"precision": 0.0, "recall": 0.0, "f1": 0.0}

    def test_best_threshold_beats_fixed(self):
        scores = np.array([0.1, 0.2, 0.3, 0.4, 0.9, 0.8, 0.95, 0.7])
        labels = np.array([0, 0, 0, 1, 0, 0, 1, 1])
        best, thr = best_threshold_f1(scores, labels)
        assert best >= evaluator_metrics(scores, labels, 0.5)["f1"]
        assert 0.0 <= thr <= 1.0

    def test_length_mismatch_rejected(self):
        with pytest.raises(UsageError):
            evaluator_metrics([0.5], [0, 1], 0.5)


class TestLabeling:
    def test_substitution_oracle_on_task_sequences(self, arith_task, ngram_model):
        sequences = arith_task.labeling_sequences(6, seed=0)
        report = gen_labels(sequences, ngram_model, arith_task.judge)
        assert report.skipped == 0
        assert len(report.samples) > 0
        top_m = default_top_m(64)
        for sample in report.samples:
            assert sample.window.shape == (3 * top_m,)
            assert sample.label in (0, 1)
            assert sample.position >= 1  # position 0 carries no distribution
        labels = {s.label for s in report.samples}
        assert labels == {0, 1}  # answer digits critical, filler tolerant

    def test_answer_positions_are_critical(self, arith_task, ngram_model):
        sequences = arith_task.labeling_sequences(6, seed=0)
        report = gen_labels(sequences, ngram_model, arith_task.judge)
        eq = arith_task.vocab.eq
        for sample in report.samples:
            seq = sequences[sample.seq_index]
            if seq[sample.position - 1] == eq:  # the answer digit slot
                assert sample.label == 0

    def test_unparseable_sequences_skipped(self, arith_task, ngram_model):
        junk = [[0, 16, 17, 22]]  # no question marker anywhere
        good = arith_task.labeling_sequences(1, seed=1)
        report = gen_labels(junk + good, ngram_model, arith_task.judge)
        assert report.skipped == 1

    def test_window_extent_validation(self, arith_task, ngram_model):
        with pytest.raises(UsageError):
            gen_labels([[0, 1]], ngram_model, arith_task.judge, n_before=-1)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        params = init_evaluator(5, 4, 3, seed=8)
        path = tmp_path / "evaluator.json"
        save_evaluator(params, path)
        loaded = load_evaluator(path)
        w = np.linspace(0, 1, 5)
        assert evaluate_capacity(loaded, w) == evaluate_capacity(params, w)

    def test_load_rejects_bad_files(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"format_version": 1, "kind": "model"}')
        with pytest.raises(DataError):
            load_evaluator(bad)
        with pytest.raises(DataError):
            load_evaluator(tmp_path / "missing.json")
