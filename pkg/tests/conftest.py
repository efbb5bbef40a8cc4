"""Shared fixtures: one fully built experiment world plus small standalone
backends, all session-scoped because they are deterministic and read-only."""

from __future__ import annotations

import time

import pytest
from hypothesis import settings

from wmkit import (
    ExperimentConfig,
    NGramConfig,
    TransformerConfig,
    TransformerModel,
    build_vocabulary,
    build_world,
    derive_key,
    fit_ngram,
    init_transformer,
    make_task,
)

settings.register_profile("suite", deadline=None, max_examples=50)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def key() -> bytes:
    return derive_key(0)


@pytest.fixture(scope="session")
def world():
    """Default experiment world; reps=5 so trade-off tables average five draws.

    Build wall time (labeling plus evaluator training) is stashed on the world
    so tests with runtime budgets can charge it where it belongs.
    """
    started = time.perf_counter()
    built = build_world(ExperimentConfig(reps=5))
    built.build_seconds = time.perf_counter() - started
    return built


@pytest.fixture(scope="session")
def vocab():
    return build_vocabulary(64)


@pytest.fixture(scope="session")
def arith_task(vocab):
    return make_task("arithmetic", vocab, seed=0)


@pytest.fixture(scope="session")
def ngram_model(arith_task):
    return fit_ngram(arith_task.training_corpus(seed=0), NGramConfig(64, 5, 0.01))


@pytest.fixture(scope="session")
def tiny_transformer():
    params = init_transformer(TransformerConfig(
        vocab_size=64, d_model=32, n_layers=2, n_heads=4, max_seq_len=320, seed=0,
    ))
    return TransformerModel(params)
