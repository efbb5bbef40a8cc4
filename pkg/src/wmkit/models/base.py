"""Shared backend contract: next-token distributions plus decode sessions.

Both backends (transformer, n-gram) expose the same small surface:

- ``vocab_size``
- ``next_logits(prefix)``: pure, stateless scoring of one position
- ``sequence_logits(tokens)``: rows 0..T-2 score tokens[1:], for perplexity
- ``open_session(prompt)``: an incremental decode session

A session owns its cache. Per position the decode loop either calls ``step``
(plain decoding: one row-extending forward) or ``pregenerate`` followed by
``commit`` (speculative decoding: the next-position distribution for every
candidate in one pass, then the chosen branch is adopted without recomputing).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError, UsageError

DIST_ATOL = 1e-9

TREE = "tree"
SEQUENTIAL = "sequential"
BATCH = "batch"
PREGEN_MODES = (TREE, SEQUENTIAL, BATCH)


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def check_dist(dist: np.ndarray, atol: float = DIST_ATOL) -> np.ndarray:
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 1:
        raise UsageError("probability row must be 1-D")
    if np.any(dist < 0) or not np.isfinite(dist).all():
        raise DataError("probability row has negative or non-finite entries")
    if abs(float(dist.sum()) - 1.0) > atol:
        raise DataError(f"probability row sums to {dist.sum()!r}, not 1")
    return dist


def greedy_token(logits: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest token id on ties.
    return int(np.argmax(logits))


@dataclass
class SessionCounters:
    """Instrumentation for the per-token compute budget and memory notes."""

    prefills: int = 0
    steps: int = 0
    pregens: int = 0
    branch_forwards: int = 0  # per-candidate forwards outside the tree pass
    alloc_bytes: int = 0  # attention workspace allocated, analytic estimate


class DecodeSession:
    """Template for incremental decode sessions (see module docstring)."""

    counters: SessionCounters

    @property
    def vocab_size(self) -> int:
        raise NotImplementedError

    @property
    def logits(self) -> np.ndarray:
        """Logits row for the next (not yet committed) position."""
        raise NotImplementedError

    @property
    def dist(self) -> np.ndarray:
        return softmax(self.logits)

    def step(self, token: int) -> None:
        """Commit `token` and advance by one plain forward computation."""
        raise NotImplementedError

    def pregenerate(self, candidates: list[int], mode: str = TREE) -> np.ndarray:
        """Next-position logits for each candidate; nothing is committed."""
        raise NotImplementedError

    def commit(self, token: int) -> None:
        """Adopt a pregenerated branch; reuses its state, no extra forward."""
        raise NotImplementedError
