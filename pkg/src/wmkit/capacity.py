"""Per-token watermark-capacity evaluation.

A position's "capacity" summarizes how tolerant the text is to replacing that
token. Labels follow the substitution-oracle convention: 0 = quality-critical
(swapping the token for the model's best alternative changes the task
verdict), 1 = tolerant. The learned evaluator is a 3-layer fully connected
network over a contextual state window — the concatenated, descending-sorted
top-M probability segments of the model distributions at positions
i-n_before .. i+n_after — trained with binary cross-entropy, so its output
approximates P(tolerant | window).

Two single-scalar baselines ship for comparison: normalized entropy of the
current distribution and the exponentiated negative top-2 logit gap. All
scores live in the open interval (0, 1); prediction convention everywhere is
"critical iff score < threshold".
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, TrainingError, UsageError
from .models.base import softmax

EPS = 1e-9
SCORE_CLIP = 1e-12  # keeps the sigmoid output strictly inside (0, 1)

LABEL_CRITICAL = 0
LABEL_TOLERANT = 1

FORMAT_VERSION = 1


def default_top_m(vocab_size: int) -> int:
    return min(100, vocab_size)


def top_segment(dist: np.ndarray, top_m: int) -> np.ndarray:
    """Sorted descending top-`top_m` probabilities, zero-padded to length top_m."""
    if top_m < 1:
        raise UsageError("top_m must be >= 1")
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 1:
        raise UsageError("distributions must be 1-D")
    if dist.shape[0] > top_m:
        # partition first so only the kept top_m values get sorted
        top = np.sort(np.partition(dist, dist.shape[0] - top_m)[-top_m:])[::-1]
    else:
        top = np.sort(dist)[::-1]
    if top.shape[0] < top_m:
        top = np.concatenate([top, np.zeros(top_m - top.shape[0])])
    return top


def build_state_window(
    dists: Sequence[np.ndarray | None],
    top_m: int,
) -> np.ndarray:
    """Concatenate the sorted top-`top_m` probabilities of each distribution.

    `None` entries mark missing context (sequence boundary) and contribute an
    all-zero segment. Segments shorter than top_m are zero-padded on the
    right, so every window has length len(dists) * top_m.
    """
    if top_m < 1:
        raise UsageError("top_m must be >= 1")
    if not dists:
        raise UsageError("need at least one distribution")
    return np.concatenate([
        np.zeros(top_m) if dist is None else top_segment(dist, top_m)
        for dist in dists
    ])


@dataclass
class EvaluatorParams:
    """3-layer MLP: relu, relu, sigmoid head."""

    w1: np.ndarray  # (F, H1)
    b1: np.ndarray
    w2: np.ndarray  # (H1, H2)
    b2: np.ndarray
    w3: np.ndarray  # (H2,)
    b3: float

    @property
    def n_features(self) -> int:
        return int(self.w1.shape[0])

    def copy(self) -> "EvaluatorParams":
        return EvaluatorParams(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
            self.w3.copy(), float(self.b3),
        )


def init_evaluator(n_features: int, hidden1: int = 64, hidden2: int = 32, seed: int = 0) -> EvaluatorParams:
    if n_features < 1 or hidden1 < 1 or hidden2 < 1:
        raise UsageError("layer sizes must be positive")
    rng = np.random.default_rng(seed)
    return EvaluatorParams(
        w1=rng.normal(0.0, math.sqrt(2.0 / n_features), size=(n_features, hidden1)),
        b1=np.zeros(hidden1),
        w2=rng.normal(0.0, math.sqrt(2.0 / hidden1), size=(hidden1, hidden2)),
        b2=np.zeros(hidden2),
        w3=rng.normal(0.0, math.sqrt(2.0 / hidden2), size=hidden2),
        b3=0.0,
    )


def make_constant_evaluator(n_features: int, value: float) -> EvaluatorParams:
    """All-zero network except the output bias: returns `value` for any window."""
    if not 0.0 < value < 1.0:
        raise UsageError("value must lie in (0, 1)")
    params = init_evaluator(n_features, 1, 1, seed=0)
    params.w1 = np.zeros_like(params.w1[:, :1])
    params.b1 = np.zeros(1)
    params.w2 = np.zeros((1, 1))
    params.b2 = np.zeros(1)
    params.w3 = np.zeros(1)
    params.b3 = float(math.log(value / (1.0 - value)))
    return params


def flip_evaluator(params: EvaluatorParams) -> EvaluatorParams:
    """Exact complement: sigmoid(-z) = 1 - sigmoid(z).

    The decode gate wants a score that is high on positions to protect; a
    network trained on {0=critical, 1=tolerant} labels predicts the opposite
    orientation, so the harness hands the gate this flipped copy.
    """
    out = params.copy()
    out.w3 = -out.w3
    out.b3 = -out.b3
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_logits(params: EvaluatorParams, x: np.ndarray):
    z1 = x @ params.w1 + params.b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ params.w2 + params.b2
    a2 = np.maximum(z2, 0.0)
    z3 = a2 @ params.w3 + params.b3
    return z3, (x, z1, a1, z2, a2)


def evaluate_capacity(params: EvaluatorParams, window: np.ndarray) -> float:
    """Evaluator score in the open interval (0, 1) for one state window."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (params.n_features,):
        raise UsageError(f"window has shape {window.shape}, expected ({params.n_features},)")
    z3, _ = _forward_logits(params, window[None, :])
    score = float(_sigmoid(z3)[0])
    return min(max(score, SCORE_CLIP), 1.0 - SCORE_CLIP)


def evaluate_capacity_batch(params: EvaluatorParams, windows: np.ndarray) -> np.ndarray:
    windows = np.asarray(windows, dtype=np.float64)
    z3, _ = _forward_logits(params, windows)
    return np.clip(_sigmoid(z3), SCORE_CLIP, 1.0 - SCORE_CLIP)


def bce_loss(params: EvaluatorParams, x: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy, computed from logits for stability."""
    z3, _ = _forward_logits(params, x)
    loss = np.maximum(z3, 0.0) - z3 * y + np.log1p(np.exp(-np.abs(z3)))
    return float(loss.mean())


def bce_gradients(params: EvaluatorParams, x: np.ndarray, y: np.ndarray) -> dict[str, np.ndarray]:
    """Analytic gradients of `bce_loss` with respect to every parameter."""
    n = x.shape[0]
    z3, (x, z1, a1, z2, a2) = _forward_logits(params, x)
    dz3 = (_sigmoid(z3) - y) / n
    grads = {
        "w3": a2.T @ dz3,
        "b3": float(dz3.sum()),
    }
    da2 = np.outer(dz3, params.w3)
    dz2 = da2 * (z2 > 0)
    grads["w2"] = a1.T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    da1 = dz2 @ params.w2.T
    dz1 = da1 * (z1 > 0)
    grads["w1"] = x.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return grads


@dataclass(frozen=True)
class TrainConfig:
    hidden1: int = 64
    hidden2: int = 32
    learning_rate: float = 1e-2
    epochs: int = 30
    batch_size: int = 64
    val_fraction: float = 0.2
    seed: int = 0


@dataclass
class TrainResult:
    params: EvaluatorParams
    best_epoch: int
    history: list[dict] = field(default_factory=list)


@dataclass(frozen=True)
class LabeledSample:
    window: np.ndarray
    label: int
    seq_index: int = -1
    position: int = -1


def _dataset_arrays(dataset: Sequence[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    if not dataset:
        raise TrainingError("dataset is empty")
    x = np.stack([np.asarray(s.window, dtype=np.float64) for s in dataset])
    y = np.array([s.label for s in dataset], dtype=np.float64)
    if set(np.unique(y)) - {0.0, 1.0}:
        raise TrainingError("labels must be 0 or 1")
    if np.unique(y).shape[0] < 2:
        raise TrainingError("dataset contains a single class")
    return x, y


def train_evaluator(dataset: Sequence[LabeledSample], config: TrainConfig = TrainConfig()) -> TrainResult:
    """Mini-batch Adam on mean BCE; returns the best-validation-epoch weights.

    Fully deterministic given (dataset order, config.seed): the train/val
    split, per-epoch shuffles and init all derive from one seeded generator.
    """
    x, y = _dataset_arrays(dataset)
    n = x.shape[0]
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    n_val = int(round(config.val_fraction * n))
    if config.val_fraction > 0 and n >= 4:
        n_val = max(1, min(n_val, n - 2))
    else:
        n_val = 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if np.unique(y[train_idx]).shape[0] < 2:
        raise TrainingError("training split contains a single class")
    xt, yt = x[train_idx], y[train_idx]
    xv, yv = (x[val_idx], y[val_idx]) if n_val else (xt, yt)

    params = init_evaluator(x.shape[1], config.hidden1, config.hidden2, seed=config.seed)
    moments = {k: (np.zeros_like(getattr(params, k)), np.zeros_like(getattr(params, k)))
               for k in ("w1", "b1", "w2", "b2", "w3")}
    m_b3 = v_b3 = 0.0
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    best = params.copy()
    best_loss = math.inf
    best_epoch = -1
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(xt.shape[0])
        for start in range(0, xt.shape[0], config.batch_size):
            batch = order[start : start + config.batch_size]
            grads = bce_gradients(params, xt[batch], yt[batch])
            step += 1
            corr1 = 1.0 - beta1**step
            corr2 = 1.0 - beta2**step
            for key in moments:
                g = grads[key]
                m, v = moments[key]
                m[...] = beta1 * m + (1 - beta1) * g
                v[...] = beta2 * v + (1 - beta2) * g * g
                getattr(params, key)[...] -= config.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + eps)
            m_b3 = beta1 * m_b3 + (1 - beta1) * grads["b3"]
            v_b3 = beta2 * v_b3 + (1 - beta2) * grads["b3"] ** 2
            params.b3 -= config.learning_rate * (m_b3 / corr1) / (math.sqrt(v_b3 / corr2) + eps)
        train_loss = bce_loss(params, xt, yt)
        val_loss = bce_loss(params, xv, yv)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        if val_loss < best_loss:
            best_loss = val_loss
            best = params.copy()
            best_epoch = epoch
    return TrainResult(params=best, best_epoch=best_epoch, history=history)


def entropy_capacity(dist: np.ndarray) -> float:
    """Shannon entropy of `dist` normalized by ln(V), clamped to (eps, 1-eps)."""
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 1 or dist.shape[0] < 2:
        raise UsageError("need a 1-D distribution over >= 2 tokens")
    positive = dist[dist > 0.0]
    entropy = float(-(positive * np.log(positive)).sum())
    score = entropy / math.log(dist.shape[0])
    return min(max(score, EPS), 1.0 - EPS)


def logit_delta_capacity(logits: np.ndarray) -> float:
    """exp(-(top1 - top2 logit)), clamped to (eps, 1-eps); ties give 1-eps."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise UsageError("need a 1-D logits row over >= 2 tokens")
    top2 = np.partition(logits, -2)[-2:]
    score = math.exp(-(float(top2[1]) - float(top2[0])))
    return min(max(score, EPS), 1.0 - EPS)


@dataclass
class LabelingReport:
    samples: list[LabeledSample]
    skipped: int  # sequences whose unmodified verdict already failed


def gen_labels(
    sequences: Sequence[Sequence[int]],
    model,
    judge: Callable[[Sequence[int]], object | None],
    n_before: int = 1,
    n_after: int = 1,
    top_m: int | None = None,
) -> LabelingReport:
    """Label every position of every sequence with the substitution oracle.

    Position i is critical (label 0) iff swapping token i for the model's
    best-ranked alternative changes the judge's verdict; a judge returning
    None means the (modified) sequence is unparseable, which counts as a
    changed verdict. Sequences the judge cannot parse unmodified are skipped
    and counted. Windows cover positions i-n_before .. i+n_after; position 0
    carries no model distribution and is never labeled.
    """
    if n_before < 0 or n_after < 0:
        raise UsageError("window extents must be >= 0")
    top_m = default_top_m(model.vocab_size) if top_m is None else top_m
    samples: list[LabeledSample] = []
    skipped = 0
    for seq_index, seq in enumerate(sequences):
        seq = [int(t) for t in seq]
        if len(seq) < 2:
            continue
        base_verdict = judge(seq)
        if base_verdict is None:
            skipped += 1
            continue
        rows = model.sequence_logits(seq)  # rows[j-1] scores position j
        dists = [None] + [softmax(rows[j]) for j in range(rows.shape[0])]
        dists.append(softmax(model.next_logits(seq)))  # one past the end
        for pos in range(1, len(seq)):
            ranked = np.argsort(-dists[pos], kind="stable")
            alt = int(ranked[0]) if int(ranked[0]) != seq[pos] else int(ranked[1])
            mutated = seq.copy()
            mutated[pos] = alt
            label = LABEL_TOLERANT if judge(mutated) == base_verdict else LABEL_CRITICAL
            window_dists = [
                dists[j] if 1 <= j <= len(seq) else None
                for j in range(pos - n_before, pos + n_after + 1)
            ]
            samples.append(LabeledSample(
                window=build_state_window(window_dists, top_m),
                label=label,
                seq_index=seq_index,
                position=pos,
            ))
    return LabelingReport(samples=samples, skipped=skipped)


def evaluator_metrics(scores: Sequence[float], labels: Sequence[int], threshold: float) -> dict[str, float]:
    """Precision/recall/F1 for the critical class (label 0, score < threshold)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise UsageError("scores and labels must have equal length")
    predicted = scores < threshold
    actual = labels == LABEL_CRITICAL
    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def best_threshold_f1(scores: Sequence[float], labels: Sequence[int], grid: int = 101) -> tuple[float, float]:
    """Max F1 over `grid` evenly spaced thresholds in [0, 1]; ties -> lowest."""
    best_f1, best_thr = -1.0, 0.0
    for thr in np.linspace(0.0, 1.0, grid):
        f1 = evaluator_metrics(scores, labels, float(thr))["f1"]
        if f1 > best_f1:
            best_f1, best_thr = f1, float(thr)
    return best_f1, best_thr


def save_evaluator(params: EvaluatorParams, path: str | Path) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": "evaluator",
        "weights": {
            "w1": params.w1.tolist(), "b1": params.b1.tolist(),
            "w2": params.w2.tolist(), "b2": params.b2.tolist(),
            "w3": params.w3.tolist(), "b3": params.b3,
        },
    }
    Path(path).write_text(json.dumps(payload))


def load_evaluator(path: str | Path) -> EvaluatorParams:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read evaluator file {path}: {exc}") from exc
    if payload.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported format_version {payload.get('format_version')!r}")
    if payload.get("kind") != "evaluator":
        raise DataError(f"not an evaluator file: kind={payload.get('kind')!r}")
    w = payload["weights"]
    return EvaluatorParams(
        w1=np.asarray(w["w1"], dtype=np.float64),
        b1=np.asarray(w["b1"], dtype=np.float64),
        w2=np.asarray(w["w2"], dtype=np.float64),
        b2=np.asarray(w["b2"], dtype=np.float64),
        w3=np.asarray(w["w3"], dtype=np.float64),
        b3=float(w["b3"]),
    )
