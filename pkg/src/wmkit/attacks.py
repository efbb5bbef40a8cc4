"""Token-level text perturbation attacks for robustness evaluation.

Three attacks, all deterministic given their seed and all selecting positions
independently with probability p:

- word_sub: replace the token with a uniform draw from its synonym class
  (excluding itself); singleton classes fall back to a uniform draw over the
  whole vocabulary excluding the original.
- word_del: delete the token.
- word_sub_context: replace the token with a uniform draw from the model's
  top-k next-token predictions given the preceding context, excluding the
  original. Position 0 has no preceding context and is never selected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, UsageError
from .models.base import softmax
from .schemes import top_k_tokens

WORD_SUB = "word-s"
WORD_DEL = "word-d"
WORD_SUB_CONTEXT = "word-s-context"
ATTACK_KINDS = (WORD_SUB, WORD_DEL, WORD_SUB_CONTEXT)


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    p: float = 0.1
    seed: int = 0
    top_k: int = 5  # proposals for the contextual substitution

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError("attack probability must lie in [0, 1]")
        if self.kind == WORD_SUB_CONTEXT and self.top_k < 2:
            raise ConfigError("contextual substitution needs top_k >= 2")


def _check_text(text: Sequence[int]) -> list[int]:
    out = [int(t) for t in text]
    if any(t < 0 for t in out):
        raise UsageError("token ids must be non-negative")
    return out


def _class_map(synonym_classes: Sequence[Sequence[int]]) -> dict[int, list[int]]:
    mapping: dict[int, list[int]] = {}
    for cls in synonym_classes:
        members = [int(t) for t in cls]
        for tok in members:
            if tok in mapping:
                raise UsageError(f"token {tok} appears in two synonym classes")
            mapping[tok] = members
    return mapping


def word_sub(
    text: Sequence[int],
    p: float,
    seed: int,
    synonym_classes: Sequence[Sequence[int]],
    vocab_size: int,
) -> list[int]:
    """Synonym-class substitution at rate p (see module docstring)."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError("p must lie in [0, 1]")
    text = _check_text(text)
    mapping = _class_map(synonym_classes)
    rng = np.random.default_rng(seed)
    hit = rng.random(len(text)) < p
    out = list(text)
    for i in np.flatnonzero(hit):
        tok = text[i]
        options = [t for t in mapping.get(tok, [tok]) if t != tok]
        if options:
            out[i] = int(options[rng.integers(len(options))])
        else:
            # uniform over the vocabulary excluding the original token
            draw = int(rng.integers(vocab_size - 1))
            out[i] = draw + 1 if draw >= tok else draw
    return out


def word_del(text: Sequence[int], p: float, seed: int) -> list[int]:
    """Independent deletion at rate p; p=1 yields the empty sequence."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError("p must lie in [0, 1]")
    text = _check_text(text)
    rng = np.random.default_rng(seed)
    keep = rng.random(len(text)) >= p
    return [tok for tok, k in zip(text, keep) if k]


def word_sub_context(
    text: Sequence[int],
    p: float,
    seed: int,
    model,
    top_k: int = 5,
) -> list[int]:
    """Replace selected tokens with one of the model's top-k proposals."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError("p must lie in [0, 1]")
    if top_k < 2:
        raise ConfigError("contextual substitution needs top_k >= 2")
    if top_k > model.vocab_size:
        raise ConfigError("top_k exceeds the vocabulary size")
    text = _check_text(text)
    rng = np.random.default_rng(seed)
    hit = rng.random(len(text)) < p
    out = list(text)
    for i in np.flatnonzero(hit):
        if i == 0:
            continue  # no preceding context to condition on
        dist = softmax(model.next_logits(out[:i]))
        proposals = [int(t) for t in top_k_tokens(dist, top_k) if int(t) != text[i]]
        out[i] = proposals[rng.integers(len(proposals))]
    return out


def apply_attack(
    text: Sequence[int],
    config: AttackConfig,
    synonym_classes: Sequence[Sequence[int]] | None = None,
    vocab_size: int | None = None,
    model=None,
) -> list[int]:
    """Dispatch on config.kind, validating that the needed context is present."""
    if config.kind == WORD_DEL:
        return word_del(text, config.p, config.seed)
    if config.kind == WORD_SUB:
        if synonym_classes is None or vocab_size is None:
            raise UsageError("word-s needs synonym_classes and vocab_size")
        return word_sub(text, config.p, config.seed, synonym_classes, vocab_size)
    if model is None:
        raise UsageError("word-s-context needs a model")
    return word_sub_context(text, config.p, config.seed, model, config.top_k)
