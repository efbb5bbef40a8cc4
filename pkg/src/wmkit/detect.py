"""Prompt-free, model-free watermark detection plus scoring utilities.

Detection sees only token ids, the key, and the scheme configuration
(including the vocabulary size); neither the model nor the prompt enters.
Scoring starts at the first position with a full hash-window context, so a
text of length L yields T = L - hash_window scored positions.

Green-list schemes use the binomial z-score z = (g - gamma*T) / sqrt(T *
gamma * (1-gamma)); the exponential scheme uses S = sum -ln(1 - F_i(t_i))
with z = (S - T) / sqrt(T), both standard-normal under the null. The default
decision threshold is z > 4.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, UsageError
from .schemes import EXP, SchemeConfig, check_key, context_seed, exp_hash_map, partition_vocab

DEFAULT_Z_THRESHOLD = 4.0


@dataclass(frozen=True)
class DetectionResult:
    variant: str
    scored_positions: int
    statistic: float  # green count, or the exponential score sum
    z: float
    z_threshold: float
    watermarked: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _check_text(text: Sequence[int], vocab_size: int, hash_window: int) -> list[int]:
    text = [int(t) for t in text]
    if any(t < 0 or t >= vocab_size for t in text):
        raise DataError("token id out of range for vocab_size")
    if len(text) < hash_window + 1:
        raise DataError(
            f"text of length {len(text)} has no position with a full "
            f"{hash_window}-token context"
        )
    return text


def detect_green(
    text: Sequence[int],
    key: bytes,
    scheme: SchemeConfig,
    vocab_size: int,
    z_threshold: float = DEFAULT_Z_THRESHOLD,
) -> DetectionResult:
    """Green-fraction z-test for the kgw and unigram schemes."""
    if scheme.variant == EXP:
        raise UsageError("detect_green expects a partition scheme")
    check_key(key)
    text = _check_text(text, vocab_size, scheme.hash_window)
    h = scheme.hash_window
    green = 0
    for i in range(h, len(text)):
        seed = context_seed(key, text[:i], h)
        partition = partition_vocab(seed, scheme.gamma, vocab_size)
        green += bool(partition.mask[text[i]])
    t = len(text) - h
    z = (green - scheme.gamma * t) / math.sqrt(t * scheme.gamma * (1.0 - scheme.gamma))
    return DetectionResult(
        variant=scheme.variant,
        scored_positions=t,
        statistic=float(green),
        z=z,
        z_threshold=z_threshold,
        watermarked=z > z_threshold,
    )


def detect_exp(
    text: Sequence[int],
    key: bytes,
    scheme: SchemeConfig,
    vocab_size: int,
    z_threshold: float = DEFAULT_Z_THRESHOLD,
) -> DetectionResult:
    """Exponential-scheme score test: S = sum -ln(1 - F_i(t_i))."""
    if scheme.variant != EXP:
        raise UsageError("detect_exp expects the exp scheme")
    check_key(key)
    text = _check_text(text, vocab_size, scheme.hash_window)
    h = scheme.hash_window
    total = 0.0
    for i in range(h, len(text)):
        seed = context_seed(key, text[:i], h)
        f = exp_hash_map(seed, vocab_size)[text[i]]
        total += -math.log1p(-f)
    t = len(text) - h
    z = (total - t) / math.sqrt(t)
    return DetectionResult(
        variant=scheme.variant,
        scored_positions=t,
        statistic=total,
        z=z,
        z_threshold=z_threshold,
        watermarked=z > z_threshold,
    )


def detect(
    text: Sequence[int],
    key: bytes,
    scheme: SchemeConfig,
    vocab_size: int,
    z_threshold: float = DEFAULT_Z_THRESHOLD,
) -> DetectionResult:
    if scheme.variant == EXP:
        return detect_exp(text, key, scheme, vocab_size, z_threshold)
    return detect_green(text, key, scheme, vocab_size, z_threshold)


def _tie_averaged_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.shape[0], dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.shape[0]:
        j = i
        while j + 1 < values.shape[0] and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # 1-based midrank
        i = j + 1
    return ranks


def roc_auc(positive_scores: Sequence[float], negative_scores: Sequence[float]) -> float:
    """Rank-based AUROC (Mann-Whitney); ties count one half."""
    pos = np.asarray(positive_scores, dtype=np.float64)
    neg = np.asarray(negative_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise UsageError("both score sets must be non-empty")
    ranks = _tie_averaged_ranks(np.concatenate([pos, neg]))
    rank_sum = ranks[: pos.size].sum()
    u = rank_sum - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def best_f1(positive_scores: Sequence[float], negative_scores: Sequence[float]) -> tuple[float, float]:
    """Best F1 over thresholds at midpoints between adjacent sorted scores.

    Classification rule: score > threshold means positive. A threshold below
    the minimum (classify everything positive) is always swept; F1 ties keep
    the lowest threshold.
    """
    pos = np.asarray(positive_scores, dtype=np.float64)
    neg = np.asarray(negative_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise UsageError("both score sets must be non-empty")
    merged = np.unique(np.concatenate([pos, neg]))
    thresholds = [float(merged[0]) - 1.0]
    thresholds.extend(0.5 * (merged[:-1] + merged[1:]))
    best_score, best_thr = -1.0, thresholds[0]
    for thr in thresholds:
        tp = int(np.sum(pos > thr))
        fp = int(np.sum(neg > thr))
        fn = pos.size - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        if f1 > best_score:
            best_score, best_thr = f1, float(thr)
    return best_score, best_thr
