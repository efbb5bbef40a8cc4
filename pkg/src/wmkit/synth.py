"""Synthetic answer-bearing tasks over a structured toy vocabulary.

The vocabulary has four zones: a begin-of-sequence marker, the ten digits,
structural tokens (two operators, equals, separator, question marker), and
filler tokens organized into a fixed phrase inventory. Questions look like

    ? a <op> b = ans ;            (arithmetic, mod-10)
    ? k1 k2 = ans ;               (fact recall from a fixed table)

and corpora interleave worked blocks with filler phrases. Design choices that
matter downstream:

- Filler phrases come in families with different branching factors: one
  10-way family (its branch slot has the same sorted-probability shape as an
  operand digit, so single-position features cannot tell a tolerant branch
  from a critical operand), several 3-way families, and deterministic
  phrases. Tolerant positions therefore span entropies from near 0 to ~0.6.
- Question coverage in the training corpus cycles through {1,2,4,8,16,32}
  occurrences per question, and well-covered questions also carry a few
  wrong-answer blocks. Those wrong digits keep watermark flips at answer
  positions inside the corpus support (an n-gram recovers after them) while
  making the flips possible at all; they also place critical answer
  positions at mid-range entropy, inside the tolerant band, so no single
  entropy threshold separates critical from tolerant. That interleaving is
  the phenomenon the learned evaluator exists to exploit.

Everything is deterministic given (vocab size, task seed).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, UsageError

N_DIGITS = 10
COVERAGE_CYCLE = (1, 2, 4, 8, 16, 32)

VERDICT_OK = "ok"
VERDICT_BAD = "bad"


@dataclass(frozen=True)
class ToyVocabulary:
    size: int
    bos: int
    digits: tuple[int, ...]  # digits[v] is the token for value v
    plus: int
    times: int
    eq: int
    sep: int
    query: int
    filler: tuple[int, ...]
    phrases: tuple[tuple[int, ...], ...]
    phrase_families: tuple[tuple[int, ...], ...]  # index groups into phrases
    branch_prefix: tuple[int, int]
    branch_tokens: tuple[int, ...]
    suffix_tokens: tuple[int, ...]
    classes: tuple[tuple[int, ...], ...]

    def synonym_classes(self) -> list[list[int]]:
        return [list(c) for c in self.classes]

    def digit_value(self, token: int) -> int | None:
        if self.digits[0] <= token < self.digits[0] + N_DIGITS:
            return token - self.digits[0]
        return None

    def phrase_starts(self) -> list[int]:
        return sorted({p[0] for p in self.phrases})


def build_vocabulary(size: int = 64) -> ToyVocabulary:
    """Deterministic vocabulary layout for a given size (>= 40)."""
    if size < 40:
        raise ConfigError("vocabulary needs at least 40 tokens")
    bos = 0
    digits = tuple(range(1, 1 + N_DIGITS))
    plus, times, eq, sep, query = range(11, 16)
    filler = tuple(range(16, size))

    # 10-way family: prefix pair, ten branch tokens, three cycling suffixes.
    q1, q2 = filler[0], filler[1]
    branch = filler[2:12]
    suffix = filler[12:15]
    phrases = [(q1, q2, branch[i], suffix[i % 3]) for i in range(N_DIGITS)]
    families: list[tuple[int, ...]] = [tuple(range(N_DIGITS))]

    classes: list[tuple[int, ...]] = [
        (bos,), digits, (plus, times), (eq,), (sep,), (query,),
        (q1, q2), tuple(branch), tuple(suffix),
    ]

    # 3-way families: own prefix and suffix around a three-token branch slot.
    rest = list(filler[15:])
    n_threeway = min(3, (len(rest) - 4) // 5)
    for _ in range(n_threeway):
        pre, b1, b2, b3, suf = rest[:5]
        rest = rest[5:]
        families.append(tuple(range(len(phrases), len(phrases) + 3)))
        phrases.extend([(pre, b, suf) for b in (b1, b2, b3)])
        classes.extend([(b1, b2, b3), (pre, suf)])

    # Token-disjoint deterministic phrases over the remaining filler ids.
    lengths = (4, 3, 3, 2, 2)
    li = 0
    while rest:
        take = min(lengths[li % len(lengths)], len(rest))
        if len(rest) - take == 1:  # avoid a dangling one-token phrase
            take += 1
        li += 1
        chunk = tuple(rest[:take])
        rest = rest[take:]
        families.append((len(phrases),))
        phrases.append(chunk)
        classes.append(chunk)

    return ToyVocabulary(
        size=size,
        bos=bos,
        digits=digits,
        plus=plus,
        times=times,
        eq=eq,
        sep=sep,
        query=query,
        filler=filler,
        phrases=tuple(phrases),
        phrase_families=tuple(families),
        branch_prefix=(q1, q2),
        branch_tokens=tuple(branch),
        suffix_tokens=tuple(suffix),
        classes=tuple(classes),
    )


@dataclass(frozen=True)
class PromptCase:
    prompt: tuple[int, ...]
    answer_value: int
    answer_token: int


def _filler_run(vocab: ToyVocabulary, rng: np.random.Generator, min_phrases: int, max_phrases: int) -> list[int]:
    # Two-stage pick (family, then phrase) keeps each family's start token
    # equally likely regardless of how many phrases the family contains.
    out: list[int] = []
    families = vocab.phrase_families
    for _ in range(rng.integers(min_phrases, max_phrases + 1)):
        family = families[rng.integers(len(families))]
        out.extend(vocab.phrases[family[rng.integers(len(family))]])
    return out


class _QuestionTask:
    """Shared scaffolding; subclasses define the question core and answer law."""

    kind = ""

    def __init__(self, vocab: ToyVocabulary, seed: int = 0, n_shots: int = 5):
        self.vocab = vocab
        self.seed = seed
        self.n_shots = n_shots
        rng = np.random.default_rng([seed, 0xC0FFEE])
        combos = self._all_combos()
        cycle = list(COVERAGE_CYCLE)
        order = rng.permutation(len(combos))
        self._coverage = {combos[i]: cycle[rank % len(cycle)] for rank, i in enumerate(order)}

    # Subclass hooks.
    def _all_combos(self) -> list[tuple]:
        raise NotImplementedError

    def _core_tokens(self, combo) -> list[int]:
        raise NotImplementedError

    def _answer_value(self, combo) -> int:
        raise NotImplementedError

    def _parse_core(self, tokens: list[int]):
        """Return (consumed_length, combo) or None if malformed."""
        raise NotImplementedError

    # Shared machinery.
    def question_tokens(self, combo) -> list[int]:
        return [self.vocab.query, *self._core_tokens(combo), self.vocab.eq]

    def block_tokens(self, combo, answer_value: int | None = None) -> list[int]:
        value = self._answer_value(combo) if answer_value is None else answer_value
        return [*self.question_tokens(combo), self.vocab.digits[value], self.vocab.sep]

    def _answer_plan(self, combo) -> list[int]:
        """Answer values for one question's training blocks.

        Low-coverage questions are always answered correctly. Well-covered
        ones mix in a few wrong digits (always a count minority, so greedy
        still answers correctly): the wrong digits keep answer flips inside
        the corpus support and push the answer position's entropy into the
        same range as branching filler slots.
        """
        coverage = self._coverage[combo]
        answer = self._answer_value(combo)
        if coverage < 8:
            return [answer] * coverage
        if coverage >= 32:
            wrong = [(answer + 1 + j) % 10 for j in range(3)] * 2
        else:
            wrong = [(answer + 1 + j) % 10 for j in range(4)]
        return [answer] * (coverage - len(wrong)) + wrong

    def sample_case(self, rng: np.random.Generator) -> PromptCase:
        combos = self._all_combos()
        prompt: list[int] = [self.vocab.bos]
        for _ in range(self.n_shots):
            prompt.extend(self.block_tokens(combos[rng.integers(len(combos))]))
            prompt.extend(_filler_run(self.vocab, rng, 1, 3))
        combo = combos[rng.integers(len(combos))]
        prompt.extend(self.question_tokens(combo))
        value = self._answer_value(combo)
        return PromptCase(tuple(prompt), value, self.vocab.digits[value])

    def gen_corpus(self, n: int, seed: int) -> list[PromptCase]:
        """n deterministic prompt/answer cases for experiments."""
        if n < 1:
            raise UsageError("corpus size must be >= 1")
        rng = np.random.default_rng([self.seed, seed, 0x5EED])
        return [self.sample_case(rng) for _ in range(n)]

    def reference_completion(self, case: PromptCase, rng: np.random.Generator) -> list[int]:
        return [case.answer_token, self.vocab.sep, *_filler_run(self.vocab, rng, 1, 2)]

    def labeling_sequences(self, n: int, seed: int) -> list[list[int]]:
        """Single-question sequences for the substitution-oracle labeler."""
        rng = np.random.default_rng([self.seed, seed, 0x1ABE1])
        combos = self._all_combos()
        out = []
        for _ in range(n):
            combo = combos[rng.integers(len(combos))]
            seq = [self.vocab.bos, *self.block_tokens(combo), *_filler_run(self.vocab, rng, 1, 3)]
            out.append(seq)
        return out

    def training_corpus(self, seed: int = 0, streams: int = 120) -> list[list[int]]:
        """Blocks per question repeated per the coverage cycle, plus filler."""
        rng = np.random.default_rng([self.seed, seed, 0xC0 | 0x1000])
        blocks = []
        for combo in self._all_combos():
            blocks.extend((combo, value) for value in self._answer_plan(combo))
        order = rng.permutation(len(blocks))
        per_stream = max(1, len(blocks) // streams)
        out = []
        for start in range(0, len(blocks), per_stream):
            stream = [self.vocab.bos]
            for idx in order[start : start + per_stream]:
                combo, value = blocks[idx]
                stream.extend(self.block_tokens(combo, value))
                stream.extend(_filler_run(self.vocab, rng, 1, 3))
            out.append(stream)
        return out

    def extract_answer(self, completion: Sequence[int]) -> int | None:
        """Value of the first digit within the first few completion tokens."""
        for token in list(completion)[:6]:
            value = self.vocab.digit_value(int(token))
            if value is not None:
                return value
        return None

    def judge(self, seq: Sequence[int]) -> str | None:
        """Verdict for the first question in `seq`: ok / bad / None (no parse)."""
        seq = [int(t) for t in seq]
        try:
            qpos = seq.index(self.vocab.query)
        except ValueError:
            return None
        parsed = self._parse_core(seq[qpos + 1 :])
        if parsed is None:
            return None
        consumed, combo = parsed
        eq_pos = qpos + 1 + consumed
        if eq_pos >= len(seq) or seq[eq_pos] != self.vocab.eq:
            return None
        extracted = self.extract_answer(seq[eq_pos + 1 : eq_pos + 5])
        if extracted is None:
            return None
        return VERDICT_OK if extracted == self._answer_value(combo) else VERDICT_BAD

    def accuracy(self, cases: Sequence[PromptCase], completions: Sequence[Sequence[int]]) -> float:
        if len(cases) != len(completions):
            raise UsageError("cases and completions must align")
        if not cases:
            raise DataError("no cases to score")
        hits = sum(
            1 for case, comp in zip(cases, completions)
            if self.extract_answer(comp) == case.answer_value
        )
        return hits / len(cases)


class ArithmeticTask(_QuestionTask):
    """Mod-10 arithmetic: `? a <op> b = ans ;` with op in {+, *}."""

    kind = "arithmetic"

    def _all_combos(self) -> list[tuple]:
        ops = (self.vocab.plus, self.vocab.times)
        return [(a, op, b) for a in range(N_DIGITS) for op in ops for b in range(N_DIGITS)]

    def _core_tokens(self, combo) -> list[int]:
        a, op, b = combo
        return [self.vocab.digits[a], op, self.vocab.digits[b]]

    def _answer_value(self, combo) -> int:
        a, op, b = combo
        return (a + b) % 10 if op == self.vocab.plus else (a * b) % 10

    def _parse_core(self, tokens: list[int]):
        if len(tokens) < 3:
            return None
        a = self.vocab.digit_value(tokens[0])
        b = self.vocab.digit_value(tokens[2])
        op = tokens[1]
        if a is None or b is None or op not in (self.vocab.plus, self.vocab.times):
            return None
        return 3, (a, op, b)


class RecallTask(_QuestionTask):
    """Fact recall: `? k1 k2 = ans ;` with a fixed seeded answer table."""

    kind = "recall"

    def __init__(self, vocab: ToyVocabulary, seed: int = 0, n_shots: int = 5):
        super().__init__(vocab, seed, n_shots)
        rng = np.random.default_rng([seed, 0xFAC7])
        self._table = {
            combo: int(rng.integers(N_DIGITS)) for combo in self._all_combos()
        }

    def _all_combos(self) -> list[tuple]:
        return [(k1, k2) for k1 in self.vocab.branch_tokens for k2 in self.vocab.suffix_tokens]

    def _core_tokens(self, combo) -> list[int]:
        return [combo[0], combo[1]]

    def _answer_value(self, combo) -> int:
        return self._table[combo]

    def _parse_core(self, tokens: list[int]):
        if len(tokens) < 2:
            return None
        combo = (tokens[0], tokens[1])
        if combo[0] not in self.vocab.branch_tokens or combo[1] not in self.vocab.suffix_tokens:
            return None
        return 2, combo


TASK_KINDS = {"arithmetic": ArithmeticTask, "recall": RecallTask}


def make_task(kind: str, vocab: ToyVocabulary, seed: int = 0, n_shots: int = 5) -> _QuestionTask:
    if kind not in TASK_KINDS:
        raise ConfigError(f"unknown task kind {kind!r}")
    return TASK_KINDS[kind](vocab, seed=seed, n_shots=n_shots)
