"""Add-alpha smoothed n-gram language model over token ids.

The conditional law for a context seen in training is
(count(t | ctx) + alpha) / (count(ctx) + alpha * V); an unseen context falls
back to the add-alpha smoothed unigram. Every probability is therefore
strictly positive and rows sum to 1 exactly (up to float64 rounding).

Used as the cheap "trained" backend: fit on the synthetic task corpus it
answers the arithmetic questions nearly deterministically while keeping real
entropy at filler positions, which is what the watermarking experiments need.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import ConfigError, DataError, UsageError
from .base import PREGEN_MODES, SEQUENTIAL, TREE, DecodeSession, SessionCounters

FORMAT_VERSION = 1


@dataclass(frozen=True)
class NGramConfig:
    vocab_size: int
    order: int = 5
    alpha: float = 0.5

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.order < 1:
            raise ConfigError("order must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0")


class NGramModel:
    kind = "ngram"

    def __init__(
        self,
        config: NGramConfig,
        table: dict[tuple[int, ...], np.ndarray],
        unigram: np.ndarray,
    ):
        self.config = config
        self._table = table
        self._totals = {ctx: int(c.sum()) for ctx, c in table.items()}
        self._unigram = unigram
        self._uni_total = int(unigram.sum())
        self._dist_cache: dict[tuple[int, ...], np.ndarray] = {}

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def _context(self, prefix: Sequence[int]) -> tuple[int, ...]:
        k = self.config.order - 1
        return tuple(int(t) for t in prefix[-k:]) if k > 0 else ()

    def next_dist(self, prefix: Sequence[int]) -> np.ndarray:
        ctx = self._context(prefix)
        hit = self._table.get(ctx)
        if hit is None:
            ctx = None  # all unseen contexts share the unigram fallback row
        cached = self._dist_cache.get(ctx)
        if cached is not None:
            return cached
        alpha, v = self.config.alpha, self.config.vocab_size
        if hit is None:
            dist = (self._unigram + alpha) / (self._uni_total + alpha * v)
        else:
            dist = (hit + alpha) / (self._totals[ctx] + alpha * v)
        dist.setflags(write=False)
        self._dist_cache[ctx] = dist
        return dist

    def next_logits(self, prefix: Sequence[int]) -> np.ndarray:
        return np.log(self.next_dist(prefix))

    def sequence_logits(self, tokens: Sequence[int]) -> np.ndarray:
        tokens = list(tokens)
        if len(tokens) < 2:
            raise UsageError("need at least two tokens to score a sequence")
        return np.stack([self.next_logits(tokens[: i + 1]) for i in range(len(tokens) - 1)])

    def open_session(self, prompt: Sequence[int]) -> "NGramSession":
        return NGramSession(self, prompt)


class NGramSession(DecodeSession):
    def __init__(self, model: NGramModel, prompt: Sequence[int]):
        prompt = [int(t) for t in prompt]
        if not prompt:
            raise UsageError("prompt must be non-empty")
        self.model = model
        self.counters = SessionCounters(prefills=1)
        self._tokens = prompt
        self._logits = model.next_logits(prompt)
        self._pending: dict[int, np.ndarray] = {}

    @property
    def vocab_size(self) -> int:
        return self.model.vocab_size

    @property
    def tokens(self) -> list[int]:
        return list(self._tokens)

    @property
    def logits(self) -> np.ndarray:
        return self._logits

    def step(self, token: int) -> None:
        self._pending.clear()
        self._tokens.append(int(token))
        self._logits = self.model.next_logits(self._tokens)
        self.counters.steps += 1

    def pregenerate(self, candidates: Sequence[int], mode: str = TREE) -> np.ndarray:
        if mode not in PREGEN_MODES:
            raise UsageError(f"unknown pregeneration mode {mode!r}")
        candidates = [int(c) for c in candidates]
        if len(set(candidates)) != len(candidates):
            raise UsageError("candidates must be unique")
        self._pending.clear()
        rows = []
        for cand in candidates:
            row = self.model.next_logits(self._tokens + [cand])
            self._pending[cand] = row
            rows.append(row)
            if mode == SEQUENTIAL:
                self.counters.branch_forwards += 1
        self.counters.pregens += 1
        return np.stack(rows)

    def commit(self, token: int) -> None:
        token = int(token)
        if token not in self._pending:
            raise UsageError(f"token {token} was not pregenerated")
        self._logits = self._pending.pop(token)
        self._tokens.append(token)
        self._pending.clear()


def fit_ngram(sequences: Sequence[Sequence[int]], config: NGramConfig) -> NGramModel:
    """Count n-grams (and unigrams for the fallback) over token sequences."""
    if not sequences:
        raise DataError("cannot fit an n-gram model on an empty corpus")
    v, k = config.vocab_size, config.order - 1
    table: dict[tuple[int, ...], np.ndarray] = {}
    unigram = np.zeros(v, dtype=np.float64)
    for seq in sequences:
        seq = [int(t) for t in seq]
        if any(t < 0 or t >= v for t in seq):
            raise DataError("token id out of range for vocab_size")
        for i, tok in enumerate(seq):
            unigram[tok] += 1
            if i >= k:
                ctx = tuple(seq[i - k : i])
                row = table.get(ctx)
                if row is None:
                    row = table[ctx] = np.zeros(v, dtype=np.float64)
                row[tok] += 1
    return NGramModel(config, table, unigram)


def save_ngram(model: NGramModel, path: str | Path) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": "ngram",
        "config": {
            "vocab_size": model.config.vocab_size,
            "order": model.config.order,
            "alpha": model.config.alpha,
        },
        "unigram": model._unigram.tolist(),
        "contexts": {
            ",".join(map(str, ctx)): {
                str(t): model._table[ctx][t] for t in np.flatnonzero(model._table[ctx])
            }
            for ctx in sorted(model._table)
        },
    }
    Path(path).write_text(json.dumps(payload))


def load_ngram(path: str | Path) -> NGramModel:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read ngram file {path}: {exc}") from exc
    if payload.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported format_version {payload.get('format_version')!r}")
    if payload.get("kind") != "ngram":
        raise DataError(f"not an ngram file: kind={payload.get('kind')!r}")
    config = NGramConfig(**payload["config"])
    table = {}
    for key, row in payload["contexts"].items():
        ctx = tuple(int(x) for x in key.split(",")) if key else ()
        counts = np.zeros(config.vocab_size, dtype=np.float64)
        for tok, cnt in row.items():
            counts[int(tok)] = float(cnt)
        table[ctx] = counts
    unigram = np.asarray(payload["unigram"], dtype=np.float64)
    if unigram.shape != (config.vocab_size,):
        raise DataError("unigram shape disagrees with config")
    return NGramModel(config, table, unigram)
