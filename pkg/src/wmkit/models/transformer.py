"""Decoder-only toy transformer in float64 numpy.

Pre-norm blocks, learned absolute positions, multi-head attention, ReLU MLP.
Small enough (V 64-512, D 32-64, 2 layers) that exact numerics are cheap:
cached and uncached decoding agree to 1e-9, and a multi-candidate tree pass
agrees with per-candidate sequential decoding to 1e-6.

The tree pass scores several alternative next tokens in one forward: all
candidates sit at the same position index, attend to the whole prefix and to
themselves, and are blocked from one another. Because each candidate then sees
exactly what it would see if appended alone, its per-layer K/V rows can be
spliced into the cache on commit with no recomputation.

Masking uses a large negative additive sentinel (-1e9); after the shifted
softmax every blocked weight is exactly 0.0 in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import ConfigError, DataError, UsageError
from .base import BATCH, PREGEN_MODES, SEQUENTIAL, TREE, DecodeSession, SessionCounters, softmax

MASK_SENTINEL = -1e9
FORMAT_VERSION = 1

_LAYER_FIELDS = (
    "ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_out", "b_out",
    "ln2_g", "ln2_b", "w_ff1", "b_ff1", "w_ff2", "b_ff2",
)


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 1024
    seed: int = 0

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.d_model < 1 or self.n_layers < 1 or self.n_heads < 1:
            raise ConfigError("d_model, n_layers and n_heads must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len must be >= 2")


@dataclass
class LayerParams:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w_qkv: np.ndarray  # (D, 3D)
    b_qkv: np.ndarray
    w_out: np.ndarray  # (D, D)
    b_out: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w_ff1: np.ndarray  # (D, 4D)
    b_ff1: np.ndarray
    w_ff2: np.ndarray  # (4D, D)
    b_ff2: np.ndarray


@dataclass
class TransformerParams:
    config: TransformerConfig
    tok_emb: np.ndarray  # (V, D)
    pos_emb: np.ndarray  # (S, D)
    layers: list[LayerParams]
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    w_unembed: np.ndarray  # (D, V)


def init_transformer(config: TransformerConfig) -> TransformerParams:
    """Seeded random initialization; identical config -> identical weights."""
    rng = np.random.default_rng(config.seed)
    d, v = config.d_model, config.vocab_size

    def normal(scale, *shape):
        return rng.normal(0.0, scale, size=shape)

    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerParams(
            ln1_g=np.ones(d), ln1_b=np.zeros(d),
            w_qkv=normal(0.25, d, 3 * d), b_qkv=np.zeros(3 * d),
            w_out=normal(0.25, d, d), b_out=np.zeros(d),
            ln2_g=np.ones(d), ln2_b=np.zeros(d),
            w_ff1=normal(0.25, d, 4 * d), b_ff1=np.zeros(4 * d),
            w_ff2=normal(0.25, 4 * d, d), b_ff2=np.zeros(d),
        ))
    return TransformerParams(
        config=config,
        tok_emb=normal(0.8, v, d),
        pos_emb=normal(0.15, config.max_seq_len, d),
        layers=layers,
        lnf_g=np.ones(d),
        lnf_b=np.zeros(d),
        w_unembed=normal(0.6, d, v),
    )


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


class GenerationCache:
    """Per-layer K/V rows for the committed prefix, with amortized growth."""

    def __init__(self, config: TransformerConfig, capacity: int = 64):
        self._d = config.d_model
        self._k = [np.empty((capacity, self._d)) for _ in range(config.n_layers)]
        self._v = [np.empty((capacity, self._d)) for _ in range(config.n_layers)]
        self.length = 0
        self.last_logits: np.ndarray | None = None

    def kv(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        return self._k[layer][: self.length], self._v[layer][: self.length]

    def append(self, layer: int, k_rows: np.ndarray, v_rows: np.ndarray) -> None:
        n = k_rows.shape[0]
        buf = self._k[layer]
        if self.length + n > buf.shape[0]:
            cap = max(2 * buf.shape[0], self.length + n)
            for store in (self._k, self._v):
                grown = np.empty((cap, self._d))
                grown[: self.length] = store[layer][: self.length]
                store[layer] = grown
            buf = self._k[layer]
        self._k[layer][self.length : self.length + n] = k_rows
        self._v[layer][self.length : self.length + n] = v_rows

    def advance(self, n: int) -> None:
        self.length += n


def build_tree_mask(prefix_len: int, fanout: int, self_exempt: bool = True) -> np.ndarray:
    """Boolean allow-matrix (True = may attend) for a prefix plus a candidate block.

    Rows/columns 0..prefix_len-1 are the causal prefix; the last `fanout`
    rows are sibling candidates for the same position: each attends to the
    full prefix and (by default) itself, never to a sibling. `self_exempt=False`
    reproduces the variant that also blocks the diagonal inside the candidate
    block; it exists for comparison only and breaks tree/sequential equivalence.
    """
    if fanout < 1:
        raise UsageError("fanout must be >= 1")
    if prefix_len < 0:
        raise UsageError("prefix_len must be >= 0")
    n = prefix_len + fanout
    allow = np.tril(np.ones((n, n), dtype=bool))
    block = slice(prefix_len, n)
    allow[block, block] = False
    if self_exempt:
        idx = np.arange(prefix_len, n)
        allow[idx, idx] = True
    return allow


def _attend_rows(
    params: TransformerParams,
    tokens: Sequence[int],
    positions: Sequence[int],
    past: GenerationCache | None,
    allow_new: np.ndarray,
    counters: SessionCounters | None = None,
) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Forward `tokens` (new rows) against cached K/V plus themselves.

    allow_new: bool (n_new, past_len + n_new); True = attend. Returns the
    logits for every new row and the per-layer K/V rows (not yet cached).
    """
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.shape[0] == 0:
        raise UsageError("need at least one new token row")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise UsageError("token id out of range")
    positions = np.asarray(positions, dtype=np.int64)
    if positions.max() >= cfg.max_seq_len:
        raise UsageError(f"position {positions.max()} exceeds max_seq_len {cfg.max_seq_len}")
    n = tokens.shape[0]
    h, hd = cfg.n_heads, cfg.d_model // cfg.n_heads
    past_len = past.length if past is not None else 0
    bias = np.where(allow_new, 0.0, MASK_SENTINEL)

    x = params.tok_emb[tokens] + params.pos_emb[positions]
    new_k: list[np.ndarray] = []
    new_v: list[np.ndarray] = []
    for li, lay in enumerate(params.layers):
        hidden = _layer_norm(x, lay.ln1_g, lay.ln1_b)
        qkv = hidden @ lay.w_qkv + lay.b_qkv
        q, k, v = qkv[:, : cfg.d_model], qkv[:, cfg.d_model : 2 * cfg.d_model], qkv[:, 2 * cfg.d_model :]
        if past_len:
            pk, pv = past.kv(li)
            k_all = np.concatenate([pk, k])
            v_all = np.concatenate([pv, v])
        else:
            k_all, v_all = k, v
        t = k_all.shape[0]
        qh = q.reshape(n, h, hd).transpose(1, 0, 2)
        kh = k_all.reshape(t, h, hd).transpose(1, 2, 0)
        scores = (qh @ kh) / np.sqrt(hd) + bias
        scores -= scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=-1, keepdims=True)
        vh = v_all.reshape(t, h, hd).transpose(1, 0, 2)
        ctx = (weights @ vh).transpose(1, 0, 2).reshape(n, cfg.d_model)
        if counters is not None:
            counters.alloc_bytes += scores.nbytes + weights.nbytes + k_all.nbytes + v_all.nbytes
        x = x + ctx @ lay.w_out + lay.b_out
        hidden = _layer_norm(x, lay.ln2_g, lay.ln2_b)
        x = x + np.maximum(hidden @ lay.w_ff1 + lay.b_ff1, 0.0) @ lay.w_ff2 + lay.b_ff2
        new_k.append(k)
        new_v.append(v)
    logits = _layer_norm(x, params.lnf_g, params.lnf_b) @ params.w_unembed
    return logits, new_k, new_v


def _causal_allow(past_len: int, n_new: int) -> np.ndarray:
    cols = np.arange(past_len + n_new)
    rows = np.arange(past_len, past_len + n_new)
    return cols[None, :] <= rows[:, None]


def _extend(params, cache: GenerationCache, tokens, counters=None) -> np.ndarray:
    """Append `tokens` to the cache causally; returns logits of the last row."""
    n = len(tokens)
    positions = range(cache.length, cache.length + n)
    allow = _causal_allow(cache.length, n)
    logits, new_k, new_v = _attend_rows(params, tokens, positions, cache, allow, counters)
    for li in range(params.config.n_layers):
        cache.append(li, new_k[li], new_v[li])
    cache.advance(n)
    cache.last_logits = logits[-1]
    return logits


def forward_next(
    params: TransformerParams,
    prefix: Sequence[int],
    cache: GenerationCache | None = None,
) -> tuple[np.ndarray, GenerationCache]:
    """Logits for the position following `prefix`, reusing `cache` when given.

    The cache may cover any leading part of `prefix`; missing rows are computed
    once and appended. Bit-level contract: the returned row differs from a
    fresh uncached recomputation by at most 1e-9 per logit.
    """
    prefix = list(prefix)
    if not prefix:
        raise UsageError("prefix must be non-empty")
    if cache is None:
        cache = GenerationCache(params.config, capacity=max(64, len(prefix) + 1))
    if cache.length > len(prefix):
        raise UsageError("cache is longer than the supplied prefix")
    missing = prefix[cache.length :]
    if missing:
        _extend(params, cache, missing)
    elif cache.last_logits is None:
        raise UsageError("cache covers the prefix but holds no logits row")
    return np.array(cache.last_logits), cache


def tree_decode(
    params: TransformerParams,
    prefix: Sequence[int],
    candidates: Sequence[int],
    cache: GenerationCache | None = None,
) -> list[np.ndarray]:
    """Next-position logits for every candidate continuation of `prefix`.

    One masked forward scores all candidates; the cache gains any missing
    prefix rows but the candidates themselves stay uncommitted. Row i agrees
    with forward_next(params, prefix + [candidates[i]]) to 1e-6 per logit.
    """
    logits, _, _ = _tree_rows(params, prefix, candidates, cache)
    return [logits[i] for i in range(logits.shape[0])]


def _tree_rows(params, prefix, candidates, cache=None, counters=None):
    prefix = list(prefix)
    candidates = [int(c) for c in candidates]
    if not candidates:
        raise UsageError("candidates must be non-empty")
    if not prefix:
        raise UsageError("prefix must be non-empty")
    if cache is None:
        cache = GenerationCache(params.config, capacity=len(prefix) + 1)
    if cache.length > len(prefix):
        raise UsageError("cache is longer than the supplied prefix")
    if cache.length < len(prefix):
        _extend(params, cache, prefix[cache.length :], counters)
    fanout = len(candidates)
    # Candidate rows all live at position len(prefix); visibility = prefix + self.
    allow = np.zeros((fanout, cache.length + fanout), dtype=bool)
    allow[:, : cache.length] = True
    allow[np.arange(fanout), cache.length + np.arange(fanout)] = True
    positions = [len(prefix)] * fanout
    return _attend_rows(params, candidates, positions, cache, allow, counters)


class TransformerSession(DecodeSession):
    """Incremental decode session over one growing prefix."""

    def __init__(self, params: TransformerParams, prompt: Sequence[int]):
        prompt = [int(t) for t in prompt]
        if not prompt:
            raise UsageError("prompt must be non-empty")
        self.params = params
        self.counters = SessionCounters()
        self._cache = GenerationCache(params.config, capacity=len(prompt) + 64)
        self._tokens = list(prompt)
        _extend(params, self._cache, prompt, self.counters)
        self.counters.prefills = 1
        self._pending: dict[int, int] = {}  # candidate -> row index into _pending_rows
        self._pending_rows: tuple[np.ndarray, list[np.ndarray], list[np.ndarray]] | None = None

    @property
    def vocab_size(self) -> int:
        return self.params.config.vocab_size

    @property
    def tokens(self) -> list[int]:
        return list(self._tokens)

    @property
    def logits(self) -> np.ndarray:
        assert self._cache.last_logits is not None
        return self._cache.last_logits

    def step(self, token: int) -> None:
        self._pending.clear()
        self._pending_rows = None
        _extend(self.params, self._cache, [int(token)], self.counters)
        self._tokens.append(int(token))
        self.counters.steps += 1

    def pregenerate(self, candidates: Sequence[int], mode: str = TREE) -> np.ndarray:
        if mode not in PREGEN_MODES:
            raise UsageError(f"unknown pregeneration mode {mode!r}")
        candidates = [int(c) for c in candidates]
        if len(set(candidates)) != len(candidates):
            raise UsageError("candidates must be unique")
        self._pending.clear()
        if mode == TREE:
            logits, new_k, new_v = _tree_rows(
                self.params, self._tokens, candidates, self._cache, self.counters
            )
        elif mode == SEQUENTIAL:
            rows, ks, vs = [], [], []
            for cand in candidates:
                allow = _causal_allow(self._cache.length, 1)
                lg, k1, v1 = _attend_rows(
                    self.params, [cand], [self._cache.length], self._cache, allow, self.counters
                )
                rows.append(lg[0])
                ks.append(k1)
                vs.append(v1)
                self.counters.branch_forwards += 1
            logits = np.stack(rows)
            n_layers = self.params.config.n_layers
            new_k = [np.concatenate([ks[i][li] for i in range(len(candidates))]) for li in range(n_layers)]
            new_v = [np.concatenate([vs[i][li] for i in range(len(candidates))]) for li in range(n_layers)]
        else:
            logits, new_k, new_v = self._pregenerate_batch(candidates)
        self._pending_rows = (logits, new_k, new_v)
        for i, cand in enumerate(candidates):
            self._pending[cand] = i
        self.counters.pregens += 1
        return logits

    def _pregenerate_batch(self, candidates: list[int]):
        """Candidates as a batch of full sequences: prefix K/V duplicated per row.

        Numerically identical to the tree pass; kept to expose the memory cost
        of naive batch decoding via the allocation counters.
        """
        cfg = self.params.config
        fanout = len(candidates)
        h, hd = cfg.n_heads, cfg.d_model // cfg.n_heads
        x = self.params.tok_emb[np.asarray(candidates)] + self.params.pos_emb[self._cache.length]
        new_k, new_v = [], []
        for li, lay in enumerate(self.params.layers):
            hidden = _layer_norm(x, lay.ln1_g, lay.ln1_b)
            qkv = hidden @ lay.w_qkv + lay.b_qkv
            q, k, v = qkv[:, : cfg.d_model], qkv[:, cfg.d_model : 2 * cfg.d_model], qkv[:, 2 * cfg.d_model :]
            pk, pv = self._cache.kv(li)
            # np.repeat materializes a full prefix copy per batch row.
            k_all = np.concatenate([np.repeat(pk[None], fanout, axis=0), k[:, None]], axis=1)
            v_all = np.concatenate([np.repeat(pv[None], fanout, axis=0), v[:, None]], axis=1)
            t = k_all.shape[1]
            qh = q.reshape(fanout, 1, h, hd).transpose(0, 2, 1, 3)
            kh = k_all.reshape(fanout, t, h, hd).transpose(0, 2, 3, 1)
            scores = (qh @ kh) / np.sqrt(hd)
            scores -= scores.max(axis=-1, keepdims=True)
            weights = np.exp(scores)
            weights /= weights.sum(axis=-1, keepdims=True)
            vh = v_all.reshape(fanout, t, h, hd).transpose(0, 2, 1, 3)
            ctx = (weights @ vh).transpose(0, 2, 1, 3).reshape(fanout, cfg.d_model)
            self.counters.alloc_bytes += scores.nbytes + weights.nbytes + k_all.nbytes + v_all.nbytes
            x = x + ctx @ lay.w_out + lay.b_out
            hidden = _layer_norm(x, lay.ln2_g, lay.ln2_b)
            x = x + np.maximum(hidden @ lay.w_ff1 + lay.b_ff1, 0.0) @ lay.w_ff2 + lay.b_ff2
            new_k.append(k)
            new_v.append(v)
        logits = _layer_norm(x, self.params.lnf_g, self.params.lnf_b) @ self.params.w_unembed
        return logits, new_k, new_v

    def commit(self, token: int) -> None:
        token = int(token)
        if token not in self._pending:
            raise UsageError(f"token {token} was not pregenerated")
        idx = self._pending.pop(token)
        logits_rows, new_k, new_v = self._pending_rows
        for li in range(self.params.config.n_layers):
            self._cache.append(li, new_k[li][idx : idx + 1], new_v[li][idx : idx + 1])
        self._cache.advance(1)
        self._cache.last_logits = logits_rows[idx]
        self._tokens.append(token)
        self._pending.clear()
        self._pending_rows = None


class TransformerModel:
    """Convenience wrapper bundling params with the shared backend surface."""

    kind = "transformer"

    def __init__(self, params: TransformerParams):
        self.params = params

    @property
    def vocab_size(self) -> int:
        return self.params.config.vocab_size

    def next_logits(self, prefix: Sequence[int]) -> np.ndarray:
        logits, _ = forward_next(self.params, prefix, cache=None)
        return logits

    def sequence_logits(self, tokens: Sequence[int]) -> np.ndarray:
        tokens = list(tokens)
        if len(tokens) < 2:
            raise UsageError("need at least two tokens to score a sequence")
        cache = GenerationCache(self.params.config, capacity=len(tokens))
        logits = _extend(self.params, cache, tokens)
        return logits[:-1]

    def open_session(self, prompt: Sequence[int]) -> TransformerSession:
        return TransformerSession(self.params, prompt)


def save_transformer(params: TransformerParams, path: str | Path) -> None:
    cfg = params.config
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": "transformer",
        "config": {
            "vocab_size": cfg.vocab_size,
            "d_model": cfg.d_model,
            "n_layers": cfg.n_layers,
            "n_heads": cfg.n_heads,
            "max_seq_len": cfg.max_seq_len,
            "seed": cfg.seed,
        },
        "weights": {
            "tok_emb": params.tok_emb.tolist(),
            "pos_emb": params.pos_emb.tolist(),
            "lnf_g": params.lnf_g.tolist(),
            "lnf_b": params.lnf_b.tolist(),
            "w_unembed": params.w_unembed.tolist(),
            "layers": [
                {name: getattr(lay, name).tolist() for name in _LAYER_FIELDS}
                for lay in params.layers
            ],
        },
    }
    Path(path).write_text(json.dumps(payload))


def load_transformer(path: str | Path) -> TransformerParams:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read transformer file {path}: {exc}") from exc
    if payload.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported format_version {payload.get('format_version')!r}")
    if payload.get("kind") != "transformer":
        raise DataError(f"not a transformer file: kind={payload.get('kind')!r}")
    cfg = TransformerConfig(**payload["config"])
    w = payload["weights"]
    params = TransformerParams(
        config=cfg,
        tok_emb=np.asarray(w["tok_emb"], dtype=np.float64),
        pos_emb=np.asarray(w["pos_emb"], dtype=np.float64),
        layers=[
            LayerParams(**{name: np.asarray(lw[name], dtype=np.float64) for name in _LAYER_FIELDS})
            for lw in w["layers"]
        ],
        lnf_g=np.asarray(w["lnf_g"], dtype=np.float64),
        lnf_b=np.asarray(w["lnf_b"], dtype=np.float64),
        w_unembed=np.asarray(w["w_unembed"], dtype=np.float64),
    )
    d = cfg.d_model
    if params.tok_emb.shape != (cfg.vocab_size, d) or params.w_unembed.shape != (d, cfg.vocab_size):
        raise DataError("weight shapes disagree with config")
    return params
