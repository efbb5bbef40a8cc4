"""Capacity-gated watermarked generation with multi-branch pre-generation.

Per position the loop:

1. takes the current next-token distribution p(t_i) from the session,
2. enumerates the scheme's strategy set (one candidate token per strength
   level) and dedups it into a candidate list headed by the unwatermarked
   greedy choice,
3. scores all unique candidates' next-position distributions in one
   pregeneration pass (tree attention on the transformer backend),
4. builds the contextual state window [p(t_{i-1}), p(t_i), p(t_{i+1}|greedy)]
   and runs the capacity evaluator on it,
5. maps the score to a strength decision: scores >= theta leave the position
   unwatermarked, lower scores pick a proportionally stronger strategy,
6. commits the chosen candidate, reusing its pregenerated branch so the next
   iteration costs no extra forward pass.

The evaluator handed in here must be oriented so that *high* scores mean
"protect this position" (see capacity.flip_evaluator). Greedy argmax ties
break to the lowest token id everywhere, matching the base schemes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .capacity import (
    EvaluatorParams,
    default_top_m,
    entropy_capacity,
    evaluate_capacity,
    top_segment,
)
from .errors import ConfigError, UsageError
from .models.base import TREE, softmax, greedy_token
from .schemes import (
    EXP,
    GreenPartition,
    SchemeConfig,
    check_key,
    exp_hash_map,
    exp_sample,
    partition_vocab,
    reweight_logits,
    top_k_tokens,
)

GLOBAL_BEST = "global-best"
GREEN_BEST = "green-best"


@dataclass(frozen=True)
class Strategy:
    """One watermark strength level and the token it would commit."""

    descriptor: int | str  # EXP: effective top-k; partition schemes: outcome name
    candidate: int


@dataclass
class StrategySet:
    strategies: list[Strategy]
    unique_candidates: list[int]  # deduped, first entry = unwatermarked greedy


def enumerate_strategies(
    logits: np.ndarray,
    dist: np.ndarray,
    scheme: SchemeConfig,
    seed: int,
    beta: float = 1.0,
) -> StrategySet:
    """All strength levels' candidate tokens for the current position.

    EXP enumerates effective top-k = 1..round(beta*K) with a single running
    argmax over log F / p (identical output to per-k exp_sample, ties to the
    lowest token id). Partition schemes enumerate the two possible outcomes:
    the unwatermarked argmax and the best green token.
    """
    dist = np.asarray(dist, dtype=np.float64)
    vocab_size = dist.shape[0]
    if scheme.variant == EXP:
        k_limit = round(beta * scheme.top_k)
        if k_limit < 1:
            raise ConfigError(f"round(beta*top_k) = {k_limit} leaves no strategies")
        if k_limit > vocab_size:
            raise ConfigError("round(beta*top_k) exceeds the vocabulary size")
        order = top_k_tokens(dist, k_limit)
        p = dist[order]
        f = exp_hash_map(seed, vocab_size)[order]
        with np.errstate(divide="ignore"):
            scores = np.where(p > 0.0, np.log(f) / np.maximum(p, 1e-300), -np.inf)
        strategies = []
        best_score, best_tok = -np.inf, int(order[0])
        for j in range(k_limit):
            tok, s = int(order[j]), float(scores[j])
            if s > best_score or (s == best_score and tok < best_tok):
                best_score, best_tok = s, tok
            strategies.append(Strategy(descriptor=j + 1, candidate=int(order[0]) if j == 0 else best_tok))
    else:
        partition = partition_vocab(seed, scheme.gamma, vocab_size)
        global_best = greedy_token(logits)
        green = partition.green
        green_best = int(green[np.argmax(np.asarray(logits)[green])])
        strategies = [
            Strategy(descriptor=GLOBAL_BEST, candidate=global_best),
            Strategy(descriptor=GREEN_BEST, candidate=green_best),
        ]
    unique: list[int] = []
    for strat in strategies:
        if strat.candidate not in unique:
            unique.append(strat.candidate)
    return StrategySet(strategies=strategies, unique_candidates=unique)


@dataclass(frozen=True)
class AdaptiveConfig:
    """Decode-gate configuration: scheme, protection evaluator, theta, beta."""

    scheme: SchemeConfig
    evaluator: EvaluatorParams
    theta: float = 0.5
    beta: float = 1.0
    top_m: int | None = None  # feature segment width; default min(100, V)

    def __post_init__(self) -> None:
        if not 0.0 < self.theta < 1.0:
            raise ConfigError("theta must lie in (0, 1)")
        if self.beta <= 0.0:
            raise ConfigError("beta must be > 0")
        if self.scheme.variant == EXP and round(self.beta * self.scheme.top_k) < 1:
            raise ConfigError("round(beta*top_k) must be >= 1")

    def resolve_top_m(self, vocab_size: int) -> int:
        top_m = self.top_m if self.top_m is not None else default_top_m(vocab_size)
        if self.evaluator.n_features != 3 * top_m:
            raise ConfigError(
                f"evaluator expects {self.evaluator.n_features} features, "
                f"window provides {3 * top_m}"
            )
        return top_m


def map_capacity_to_strength(
    score: float,
    config: AdaptiveConfig,
    logits: np.ndarray | None = None,
    partition: GreenPartition | None = None,
    green_best: int | None = None,
) -> int | str | None:
    """Strength decision for one position: None (leave unwatermarked), an
    effective top-k (EXP), or the committed outcome name (partition schemes).

    Partition schemes scale the logit bias to delta' = beta*(theta-score)/theta
    * delta and adopt the green-best outcome iff delta' closes the current
    red-green logit gap (evaluated by actually reweighting, so argmax
    tie-breaking matches plain generation exactly). `green_best`, when the
    caller already knows it, skips recomputing the best green token.
    """
    if score >= config.theta:
        return None
    frac = (config.theta - score) / config.theta
    scheme = config.scheme
    if scheme.variant == EXP:
        k_limit = round(config.beta * scheme.top_k)
        k_eff = round(config.beta * frac * scheme.top_k)
        return int(min(max(k_eff, 1), k_limit))
    if logits is None or partition is None:
        raise UsageError("partition schemes need logits and the position's partition")
    delta_eff = config.beta * frac * scheme.delta
    winner = greedy_token(reweight_logits(logits, partition, delta_eff))
    if green_best is None:
        green = partition.green
        green_best = int(green[np.argmax(np.asarray(logits)[green])])
    return GREEN_BEST if winner == green_best else GLOBAL_BEST


def effective_delta(score: float, config: AdaptiveConfig) -> float:
    if score >= config.theta:
        return 0.0
    return config.beta * (config.theta - score) / config.theta * config.scheme.delta


def _dist_digest(dist: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(dist).tobytes()).hexdigest()[:16]


def generate_wm(
    model,
    prompt: Sequence[int],
    key: bytes,
    config: AdaptiveConfig,
    max_new_tokens: int,
    mode: str = TREE,
    trace: list | None = None,
    session=None,
) -> list[int]:
    """Capacity-gated watermarked generation (see module docstring).

    Budget: one session prefill, then per emitted token exactly one
    pregeneration pass and zero plain steps (asserted by session counters in
    tests). `trace`, when given, receives one JSON-ready record per position.
    A caller timing the decode loop alone may pass a `session` already
    prefilled with exactly `prompt`.
    """
    check_key(key)
    if max_new_tokens < 0:
        raise UsageError("max_new_tokens must be >= 0")
    scheme = config.scheme
    if session is None:
        session = model.open_session(prompt)
    elif list(session.tokens) != list(prompt):
        raise UsageError("supplied session does not hold the prompt")
    if scheme.variant == EXP and scheme.top_k > session.vocab_size:
        raise ConfigError("top_k exceeds the vocabulary size")
    top_m = config.resolve_top_m(session.vocab_size)
    zero_seg = np.zeros(top_m)
    out: list[int] = []
    context = list(prompt)  # mirrors session.tokens without a per-token copy
    prev_seg: np.ndarray | None = None
    carried: tuple[np.ndarray, np.ndarray] | None = None
    for position in range(max_new_tokens):
        logits = session.logits
        if carried is None:
            dist = softmax(logits)
            mid_seg = top_segment(dist, top_m)
        else:
            # the committed branch was the greedy candidate, whose distribution
            # and window segment were already computed last iteration
            dist, mid_seg = carried
        seed = scheme.seed_for(key, context)
        strategy_set = enumerate_strategies(logits, dist, scheme, seed, config.beta)
        rows = session.pregenerate(strategy_set.unique_candidates, mode=mode)
        greedy_next = softmax(rows[0])
        next_seg = top_segment(greedy_next, top_m)
        window = np.concatenate([zero_seg if prev_seg is None else prev_seg, mid_seg, next_seg])
        score = evaluate_capacity(config.evaluator, window)
        partition = green_best = None
        if scheme.uses_partition:
            partition = partition_vocab(seed, scheme.gamma, session.vocab_size)
            green_best = next(
                s.candidate for s in strategy_set.strategies if s.descriptor == GREEN_BEST
            )
        decision = map_capacity_to_strength(
            score, config, logits=logits, partition=partition, green_best=green_best
        )
        if decision is None:
            token = strategy_set.unique_candidates[0]
        elif isinstance(decision, int):
            token = strategy_set.strategies[decision - 1].candidate
        else:
            token = next(s.candidate for s in strategy_set.strategies if s.descriptor == decision)
        session.commit(token)
        if trace is not None:
            trace.append({
                "position": position,
                "dist_sha": _dist_digest(dist),
                "score": score,
                "decision": decision,
                "candidates": list(strategy_set.unique_candidates),
                "greedy": strategy_set.unique_candidates[0],
                "committed": token,
            })
        out.append(token)
        context.append(token)
        prev_seg = mid_seg
        carried = (greedy_next, next_seg) if token == strategy_set.unique_candidates[0] else None
    return out


def generate_greedy(model, prompt: Sequence[int], max_new_tokens: int, session=None) -> list[int]:
    """Unwatermarked greedy decoding; ties break to the lowest token id."""
    if max_new_tokens < 0:
        raise UsageError("max_new_tokens must be >= 0")
    if session is None:
        session = model.open_session(prompt)
    elif list(session.tokens) != list(prompt):
        raise UsageError("supplied session does not hold the prompt")
    out = []
    for _ in range(max_new_tokens):
        token = greedy_token(session.logits)
        session.step(token)
        out.append(token)
    return out


def generate_wm_plain(
    model,
    prompt: Sequence[int],
    key: bytes,
    scheme: SchemeConfig,
    max_new_tokens: int,
    session=None,
) -> list[int]:
    """Base scheme at full strength on every position (no capacity gate)."""
    check_key(key)
    if max_new_tokens < 0:
        raise UsageError("max_new_tokens must be >= 0")
    if session is None:
        session = model.open_session(prompt)
    elif list(session.tokens) != list(prompt):
        raise UsageError("supplied session does not hold the prompt")
    if scheme.variant == EXP and scheme.top_k > session.vocab_size:
        raise ConfigError("top_k exceeds the vocabulary size")
    out = []
    context = list(prompt)
    for _ in range(max_new_tokens):
        seed = scheme.seed_for(key, context)
        if scheme.variant == EXP:
            token = exp_sample(softmax(session.logits), seed, scheme.top_k)
        else:
            partition = partition_vocab(seed, scheme.gamma, session.vocab_size)
            token = greedy_token(reweight_logits(session.logits, partition, scheme.delta))
        session.step(token)
        out.append(token)
        context.append(token)
    return out


def generate_wm_entropy_gated(
    model,
    prompt: Sequence[int],
    key: bytes,
    scheme: SchemeConfig,
    entropy_threshold: float,
    max_new_tokens: int,
) -> list[int]:
    """Entropy-gated baseline: full base strength iff the normalized entropy
    of p(t_i) reaches the threshold, otherwise plain greedy.

    threshold 0 watermarks every position (entropy scores are clamped above
    0), threshold 1 none (clamped below 1).
    """
    check_key(key)
    if not 0.0 <= entropy_threshold <= 1.0:
        raise ConfigError("entropy_threshold must lie in [0, 1]")
    if max_new_tokens < 0:
        raise UsageError("max_new_tokens must be >= 0")
    session = model.open_session(prompt)
    if scheme.variant == EXP and scheme.top_k > session.vocab_size:
        raise ConfigError("top_k exceeds the vocabulary size")
    out = []
    for _ in range(max_new_tokens):
        logits = session.logits
        dist = softmax(logits)
        if entropy_capacity(dist) >= entropy_threshold:
            seed = scheme.seed_for(key, session.tokens)
            if scheme.variant == EXP:
                token = exp_sample(dist, seed, scheme.top_k)
            else:
                partition = partition_vocab(seed, scheme.gamma, session.vocab_size)
                token = greedy_token(reweight_logits(logits, partition, scheme.delta))
        else:
            token = greedy_token(logits)
        session.step(token)
        out.append(token)
    return out


def generate_sampled(model, prompt: Sequence[int], max_new_tokens: int, seed: int) -> list[int]:
    """Ancestral sampling from the backend (temperature 1), seeded.

    Used for null-hypothesis text: greedy continuations of a toy model
    collapse onto a few orbits, which would make "1000 unwatermarked texts"
    near-duplicates; sampling draws genuinely from the model's law.
    """
    if max_new_tokens < 0:
        raise UsageError("max_new_tokens must be >= 0")
    rng = np.random.default_rng(seed)
    session = model.open_session(prompt)
    out = []
    for _ in range(max_new_tokens):
        dist = softmax(session.logits)
        token = int(rng.choice(dist.shape[0], p=dist / dist.sum()))
        session.step(token)
        out.append(token)
    return out
