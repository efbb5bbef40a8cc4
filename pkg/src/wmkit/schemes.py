"""Watermark primitives: keyed pseudorandomness, vocabulary partitions, sampling.

Everything here is a pure function of (key, token context), so generation and
detection recompute identical values without sharing state. The pseudorandom
core is a splitmix64 finalizer over a keyed 64-bit context digest; green/red
partitions come from sorting per-token splitmix keys (exact cardinality,
uniform permutation), and the exponential scheme's hash map is the same stream
mapped into the open unit interval.

Tie-breaking rule used throughout: the lowest token id wins.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ConfigError, UsageError

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
# Distinct salts keep the partition stream and the EXP hash stream independent.
_PARTITION_SALT = 0x1B873593C2B2AE35
_EXP_SALT = 0x7F4A7C159E3779B9

MIN_KEY_BYTES = 16

KGW = "kgw"
UNIGRAM = "unigram"
EXP = "exp"
SCHEME_VARIANTS = (KGW, UNIGRAM, EXP)


def check_key(key: bytes) -> bytes:
    if not isinstance(key, (bytes, bytearray)):
        raise UsageError("watermark key must be bytes")
    if len(key) < MIN_KEY_BYTES:
        raise ConfigError(f"watermark key must be at least {MIN_KEY_BYTES} bytes, got {len(key)}")
    return bytes(key)


def key_from_hex(text: str) -> bytes:
    try:
        key = bytes.fromhex(text.strip())
    except ValueError as exc:
        raise ConfigError(f"key is not valid hex: {exc}") from exc
    return check_key(key)


@lru_cache(maxsize=65536)
def _window_seed(key: bytes, window: tuple[int, ...]) -> int:
    data = struct.pack(f"<I{len(window)}I", len(window), *window)
    digest = hashlib.blake2b(data, digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little")


def context_seed(key: bytes, prefix: Sequence[int], hash_window: int) -> int:
    """Derive the 64-bit seed for the next position from the last `hash_window` tokens.

    A prefix shorter than the window is not an error: all available tokens are
    used and the window length itself is folded in as a tag, so `[a]` under
    h=2 cannot collide with `[a]` under h=1 by construction. Seeds are
    memoized per (key, window): with small hash windows the same few window
    tuples recur throughout generation and detection.
    """
    check_key(key)
    if hash_window < 0:
        raise ConfigError("hash_window must be >= 0")
    window = tuple(int(t) for t in prefix[-hash_window:]) if hash_window > 0 else ()
    return _window_seed(bytes(key), window)


def mix64(x: int) -> int:
    """splitmix64 finalizer on a single 64-bit value."""
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def _mix_stream(seed: int, salt: int, n: int) -> np.ndarray:
    """Vectorized splitmix64 stream: finalizer applied to seed^salt + i*golden."""
    base = np.uint64((seed ^ salt) & MASK64)
    x = base + np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GOLDEN)  # wraps mod 2^64
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


@dataclass(frozen=True)
class GreenPartition:
    """Key-seeded split of the vocabulary into green and red token sets."""

    green: np.ndarray  # sorted green token ids
    mask: np.ndarray  # bool, mask[t] == t is green
    gamma: float

    @property
    def vocab_size(self) -> int:
        return int(self.mask.shape[0])


@lru_cache(maxsize=65536)
def partition_vocab(seed: int, gamma: float, vocab_size: int) -> GreenPartition:
    """Partition [0, vocab_size) into green/red with |green| = round(gamma * V).

    The permutation is the argsort of per-token splitmix64 keys (stable, so the
    astronomically unlikely key tie falls back to token-id order); the first
    round(gamma * V) slots are green. Results are cached and read-only: the same
    (seed, gamma, V) triple is queried once per distinct context during both
    generation and detection.
    """
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"gamma must lie in (0, 1), got {gamma}")
    if vocab_size < 2:
        raise ConfigError("vocab_size must be >= 2")
    n_green = int(gamma * vocab_size + 0.5)
    if n_green < 1 or n_green >= vocab_size:
        raise ConfigError(f"round(gamma*V) = {n_green} leaves an empty green or red set")
    keys = _mix_stream(seed, _PARTITION_SALT, vocab_size)
    perm = np.argsort(keys, kind="stable")
    mask = np.zeros(vocab_size, dtype=bool)
    mask[perm[:n_green]] = True
    green = np.flatnonzero(mask)
    green.setflags(write=False)
    mask.setflags(write=False)
    return GreenPartition(green=green, mask=mask, gamma=gamma)


def reweight_logits(logits: np.ndarray, partition: GreenPartition, delta: float) -> np.ndarray:
    """Return a copy of `logits` with `delta` added to every green token."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.shape[0] != partition.vocab_size:
        raise UsageError("logits row and partition size differ")
    if delta < 0:
        raise UsageError("delta must be >= 0")
    out = logits.copy()
    out[partition.mask] += delta
    return out


@lru_cache(maxsize=65536)
def exp_hash_map(seed: int, vocab_size: int) -> np.ndarray:
    """Keyed map token id -> F(t) in the open interval (0, 1)."""
    if vocab_size < 1:
        raise ConfigError("vocab_size must be >= 1")
    bits = _mix_stream(seed, _EXP_SALT, vocab_size)
    # 53 high bits, offset by half a ulp: never exactly 0 or 1.
    f = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    f.setflags(write=False)
    return f


def top_k_tokens(dist: np.ndarray, k: int) -> np.ndarray:
    """The k highest-probability token ids; probability ties keep the lower id."""
    dist = np.asarray(dist, dtype=np.float64)
    if not 1 <= k <= dist.shape[0]:
        raise UsageError(f"top-k must lie in [1, {dist.shape[0]}], got {k}")
    return np.argsort(-dist, kind="stable")[:k]


def exp_sample(dist: np.ndarray, seed: int, top_k: int) -> int:
    """Pick argmax over the top-k of F(t)^(1/p(t)), i.e. of log F(t) / p(t).

    top_k=1 degenerates to greedy decoding (watermark-free); top_k=V is the
    exponential-trick sampler whose marginal law over keys equals `dist`.
    Zero-probability candidates are excluded; score ties go to the lowest id.
    """
    dist = np.asarray(dist, dtype=np.float64)
    order = top_k_tokens(dist, top_k)
    p = dist[order]
    live = p > 0.0
    order, p = order[live], p[live]
    if top_k == 1 or order.shape[0] == 1:
        return int(order[0])
    f = exp_hash_map(seed, dist.shape[0])[order]
    scores = np.log(f) / p
    best = scores.max()
    return int(order[scores == best].min())


@dataclass(frozen=True)
class SchemeConfig:
    """Configuration for one base watermark scheme.

    variant: "kgw" (context-seeded green/red reweighting), "unigram" (fixed
    partition, hash_window pinned to 0) or "exp" (top-k exponential sampling).
    hash_window defaults per variant when left as None: kgw/exp 1, unigram 0.
    """

    variant: str
    gamma: float = 0.25
    delta: float = 4.0
    top_k: int = 8
    hash_window: int | None = None

    def __post_init__(self) -> None:
        if self.variant not in SCHEME_VARIANTS:
            raise ConfigError(f"unknown scheme variant {self.variant!r}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.delta < 0:
            raise ConfigError("delta must be >= 0")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.hash_window is None:
            object.__setattr__(self, "hash_window", 0 if self.variant == UNIGRAM else 1)
        if self.hash_window < 0:
            raise ConfigError("hash_window must be >= 0")
        if self.variant == KGW and self.hash_window < 1:
            raise ConfigError("kgw requires hash_window >= 1")
        if self.variant == UNIGRAM and self.hash_window != 0:
            raise ConfigError("unigram requires hash_window == 0")

    @property
    def uses_partition(self) -> bool:
        return self.variant in (KGW, UNIGRAM)

    def seed_for(self, key: bytes, prefix: Sequence[int]) -> int:
        return context_seed(key, prefix, self.hash_window)
