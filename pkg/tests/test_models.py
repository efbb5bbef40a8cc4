"""Backends: n-gram law, transformer numerics, caches, tree pregeneration."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import tree_mask_ref
from wmkit.errors import ConfigError, DataError, UsageError
from wmkit.models import (
    BATCH,
    SEQUENTIAL,
    TREE,
    NGramConfig,
    NGramModel,
    TransformerConfig,
    TransformerModel,
    build_tree_mask,
    check_dist,
    fit_ngram,
    forward_next,
    greedy_token,
    init_transformer,
    load_ngram,
    load_transformer,
    save_ngram,
    save_transformer,
    softmax,
    tree_decode,
)


class TestBaseHelpers:
    def test_softmax_rows_normalized(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(scale=5.0, size=(20, 33))
        rows = softmax(logits)
        for row in rows:
            check_dist(row)  # raises if any row is off by more than 1e-9

    def test_softmax_extreme_logits_stable(self):
        row = softmax(np.array([1000.0, 0.0, -1000.0]))
        check_dist(row)
        assert row[0] > 0.999

    def test_greedy_tie_breaks_low(self):
        assert greedy_token(np.array([1.0, 3.0, 3.0])) == 1

    def test_check_dist_rejects_bad_rows(self):
        with pytest.raises(DataError):
            check_dist(np.array([0.5, 0.6]))
        with pytest.raises(DataError):
            check_dist(np.array([-0.1, 1.1]))
        with pytest.raises(UsageError):
            check_dist(np.ones((2, 2)) / 2)


class TestNGram:
    def test_seen_context_law_frozen(self):
        # count(1 | ctx=0) = 9 over 9 context visits, alpha=1, V=4:
        # p = (9+1)/(9+4) = 10/13, and the unseen tokens get 1/13 each.
        model = fit_ngram([[0, 1]] * 9, NGramConfig(vocab_size=4, order=2, alpha=1.0))
        dist = model.next_dist([0])
        assert dist[1] == pytest.approx(10 / 13, abs=1e-12)
        assert dist[0] == pytest.approx(1 / 13, abs=1e-12)
        check_dist(dist)

    def test_empty_table_uniform_fallback(self):
        model = NGramModel(NGramConfig(4, 2, 1.0), {}, np.zeros(4))
        assert np.allclose(model.next_dist([2]), 0.25, atol=1e-12)

    def test_unseen_context_uses_unigram(self):
        model = fit_ngram([[0, 1]] * 9, NGramConfig(vocab_size=4, order=2, alpha=1.0))
        # context 3 was never seen; unigram counts are 9 each for tokens 0,1
        dist = model.next_dist([3])
        assert dist[0] == dist[1] == pytest.approx(10 / 22, abs=1e-12)
        assert dist[2] == pytest.approx(1 / 22, abs=1e-12)

    def test_rows_strictly_positive(self, ngram_model):
        rng = np.random.default_rng(1)
        for _ in range(20):
            prefix = rng.integers(64, size=rng.integers(1, 8)).tolist()
            dist = ngram_model.next_dist(prefix)
            check_dist(dist)
            assert float(dist.min()) > 0.0

    def test_fit_rejects_empty_corpus(self):
        with pytest.raises(DataError):
            fit_ngram([], NGramConfig(4, 2, 1.0))

    def test_fit_rejects_out_of_range_tokens(self):
        with pytest.raises(DataError):
            fit_ngram([[0, 7]], NGramConfig(4, 2, 1.0))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            NGramConfig(1, 2, 1.0)
        with pytest.raises(ConfigError):
            NGramConfig(4, 0, 1.0)
        with pytest.raises(ConfigError):
            NGramConfig(4, 2, 0.0)

    def test_save_load_round_trip(self, ngram_model, tmp_path):
        path = tmp_path / "model.json"
        save_ngram(ngram_model, path)
        loaded = load_ngram(path)
        for prefix in ([0], [0, 15, 5], [63]):
            assert np.allclose(loaded.next_dist(prefix), ngram_model.next_dist(prefix), atol=0)

    def test_load_rejects_wrong_kind(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format_version": 1, "kind": "transformer"}')
        with pytest.raises(DataError):
            load_ngram(path)

    def test_session_matches_stateless_scoring(self, ngram_model):
        session = ngram_model.open_session([0, 15])
        assert np.array_equal(session.logits, ngram_model.next_logits([0, 15]))
        session.step(5)
        assert session.tokens == [0, 15, 5]
        assert np.array_equal(session.logits, ngram_model.next_logits([0, 15, 5]))

    def test_session_pregenerate_commit(self, ngram_model):
        session = ngram_model.open_session([0, 15])
        rows = session.pregenerate([3, 7], mode=TREE)
        assert np.array_equal(rows[1], ngram_model.next_logits([0, 15, 7]))
        session.commit(7)
        assert session.tokens == [0, 15, 7]
        assert np.array_equal(session.logits, ngram_model.next_logits([0, 15, 7]))

    def test_commit_without_pregenerate_rejected(self, ngram_model):
        session = ngram_model.open_session([0])
        with pytest.raises(UsageError):
            session.commit(3)

    def test_duplicate_candidates_rejected(self, ngram_model):
        session = ngram_model.open_session([0])
        with pytest.raises(UsageError):
            session.pregenerate([3, 3])

    def test_sequence_logits_shape(self, ngram_model):
        rows = ngram_model.sequence_logits([0, 15, 5, 11])
        assert rows.shape == (3, 64)
        assert np.array_equal(rows[0], ngram_model.next_logits([0]))


class TestTreeMask:
    def test_frozen_allowed_count(self):
        # prefix rows contribute 1+2 allowed entries; each of the 4 candidate
        # rows sees the 2-token prefix plus itself: 3 + 4*3 = 15.
        allow = build_tree_mask(prefix_len=2, fanout=4)
        assert int(allow.sum()) == 15

    @given(prefix_len=st.integers(0, 10), fanout=st.integers(1, 8), exempt=st.booleans())
    def test_matches_per_entry_rebuild(self, prefix_len, fanout, exempt):
        got = build_tree_mask(prefix_len, fanout, self_exempt=exempt)
        assert np.array_equal(got, tree_mask_ref(prefix_len, fanout, exempt))

    def test_siblings_never_visible(self):
        allow = build_tree_mask(3, 4)
        block = allow[3:, 3:]
        assert np.array_equal(block, np.eye(4, dtype=bool))

    def test_self_block_variant(self):
        allow = build_tree_mask(3, 4, self_exempt=False)
        assert not allow[3:, 3:].any()

    def test_bad_arguments(self):
        with pytest.raises(UsageError):
            build_tree_mask(2, 0)
        with pytest.raises(UsageError):
            build_tree_mask(-1, 2)


class TestTransformer:
    def test_init_deterministic(self):
        cfg = TransformerConfig(vocab_size=16, d_model=8, n_layers=1, n_heads=2, seed=5)
        a, b = init_transformer(cfg), init_transformer(cfg)
        assert np.array_equal(a.tok_emb, b.tok_emb)
        assert np.array_equal(a.layers[0].w_qkv, b.layers[0].w_qkv)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TransformerConfig(vocab_size=1)
        with pytest.raises(ConfigError):
            TransformerConfig(vocab_size=8, d_model=6, n_heads=4)
        with pytest.raises(ConfigError):
            TransformerConfig(vocab_size=8, max_seq_len=1)

    def test_cached_matches_uncached(self, tiny_transformer):
        model = tiny_transformer
        rng = np.random.default_rng(3)
        prefix = rng.integers(64, size=5).tolist()
        cache = None
        for _ in range(20):
            logits, cache = forward_next(model.params, prefix, cache)
            fresh = model.next_logits(prefix)
            assert np.max(np.abs(logits - fresh)) < 1e-9
            prefix.append(int(np.argmax(logits)))

    def test_sequence_logits_match_prefix_scoring(self, tiny_transformer):
        tokens = [3, 1, 4, 1, 5, 9]
        rows = tiny_transformer.sequence_logits(tokens)
        for i in range(len(tokens) - 1):
            fresh = tiny_transformer.next_logits(tokens[: i + 1])
            assert np.max(np.abs(rows[i] - fresh)) < 1e-9

    def test_tree_decode_matches_appended_forward(self, tiny_transformer):
        rng = np.random.default_rng(11)
        for _ in range(5):
            prefix = rng.integers(64, size=rng.integers(1, 40)).tolist()
            candidates = rng.choice(64, size=6, replace=False).tolist()
            rows = tree_decode(tiny_transformer.params, prefix, candidates)
            for cand, row in zip(candidates, rows):
                direct = tiny_transformer.next_logits(prefix + [cand])
                assert np.max(np.abs(row - direct)) < 1e-6

    def test_pregenerate_modes_agree(self, tiny_transformer):
        session = tiny_transformer.open_session([1, 2, 3, 4])
        tree_rows = session.pregenerate([5, 6, 7], mode=TREE)
        seq_rows = session.pregenerate([5, 6, 7], mode=SEQUENTIAL)
        batch_rows = session.pregenerate([5, 6, 7], mode=BATCH)
        assert np.max(np.abs(tree_rows - seq_rows)) < 1e-6
        assert np.max(np.abs(tree_rows - batch_rows)) < 1e-9

    def test_batch_mode_allocates_more(self, tiny_transformer):
        a = tiny_transformer.open_session(list(range(64)))
        b = tiny_transformer.open_session(list(range(64)))
        base_a, base_b = a.counters.alloc_bytes, b.counters.alloc_bytes
        a.pregenerate([1, 2, 3, 4], mode=TREE)
        b.pregenerate([1, 2, 3, 4], mode=BATCH)
        assert b.counters.alloc_bytes - base_b > a.counters.alloc_bytes - base_a

    def test_commit_matches_step(self, tiny_transformer):
        rng = np.random.default_rng(7)
        prompt = rng.integers(64, size=6).tolist()
        a = tiny_transformer.open_session(prompt)
        b = tiny_transformer.open_session(prompt)
        for _ in range(10):
            token = greedy_token(a.logits)
            other = (token + 1) % 64
            a.pregenerate([token, other], mode=TREE)
            a.commit(token)
            b.step(token)
            assert a.tokens == b.tokens
            assert np.max(np.abs(a.logits - b.logits)) < 1e-6

    def test_counters_track_budget(self, tiny_transformer):
        session = tiny_transformer.open_session([1, 2, 3])
        assert session.counters.prefills == 1
        session.step(4)
        session.pregenerate([5, 6], mode=TREE)
        session.commit(5)
        assert session.counters.steps == 1
        assert session.counters.pregens == 1
        assert session.counters.branch_forwards == 0

    def test_sequential_mode_counts_branch_forwards(self, tiny_transformer):
        session = tiny_transformer.open_session([1, 2, 3])
        session.pregenerate([4, 5, 6], mode=SEQUENTIAL)
        assert session.counters.branch_forwards == 3

    def test_unknown_pregen_mode_rejected(self, tiny_transformer):
        session = tiny_transformer.open_session([1])
        with pytest.raises(UsageError):
            session.pregenerate([2], mode="speculative")

    def test_tokens_property_returns_copy(self, tiny_transformer):
        session = tiny_transformer.open_session([1, 2])
        tokens = session.tokens
        tokens.append(99)
        assert session.tokens == [1, 2]

    def test_max_seq_len_enforced(self):
        params = init_transformer(TransformerConfig(
            vocab_size=8, d_model=8, n_layers=1, n_heads=2, max_seq_len=4, seed=0,
        ))
        model = TransformerModel(params)
        with pytest.raises(UsageError):
            model.next_logits([1, 2, 3, 4, 5])

    def test_empty_prompt_rejected(self, tiny_transformer):
        with pytest.raises(UsageError):
            tiny_transformer.open_session([])

    def test_out_of_range_token_rejected(self, tiny_transformer):
        with pytest.raises(UsageError):
            tiny_transformer.next_logits([999])

    def test_save_load_round_trip(self, tmp_path):
        params = init_transformer(TransformerConfig(
            vocab_size=12, d_model=8, n_layers=2, n_heads=2, max_seq_len=32, seed=9,
        ))
        path = tmp_path / "model.json"
        save_transformer(params, path)
        loaded = load_transformer(path)
        a = TransformerModel(params).next_logits([1, 2, 3])
        b = TransformerModel(loaded).next_logits([1, 2, 3])
        assert np.array_equal(a, b)

    def test_load_rejects_bad_payloads(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format_version": 99, "kind": "transformer"}')
        with pytest.raises(DataError):
            load_transformer(path)
        with pytest.raises(DataError):
            load_transformer(tmp_path / "missing.json")
