"""Token-level text watermarking with a learned per-position capacity gate.

The package bundles three green-list/exponential watermarking schemes, a
tree-attention pregeneration decode loop that scores every candidate branch
in one forward pass, a small numpy MLP that predicts how much watermark a
position can bear from its neighborhood of next-token distributions, and the
toy backends (decoder-only transformer, add-alpha n-gram) plus synthetic
tasks used to study the quality/detectability trade-off end to end.
"""

from .adaptive import (
    AdaptiveConfig,
    enumerate_strategies,
    generate_greedy,
    generate_sampled,
    generate_wm,
    generate_wm_entropy_gated,
    generate_wm_plain,
)
from .attacks import ATTACK_KINDS, AttackConfig, apply_attack
from .capacity import (
    EvaluatorParams,
    LabeledSample,
    TrainConfig,
    build_state_window,
    entropy_capacity,
    evaluate_capacity,
    flip_evaluator,
    gen_labels,
    load_evaluator,
    logit_delta_capacity,
    make_constant_evaluator,
    save_evaluator,
    train_evaluator,
)
from .detect import DetectionResult, best_f1, detect, detect_exp, detect_green, roc_auc
from .errors import ConfigError, DataError, TrainingError, UsageError, WmkitError
from .experiments import (
    BenchConfig,
    ExperimentConfig,
    build_world,
    derive_key,
    evaluator_report,
    replay_fingerprint,
    run_bench,
    run_calibration,
    run_robustness,
    run_tradeoff,
    write_report,
)
from .models import (
    NGramConfig,
    NGramModel,
    TransformerConfig,
    TransformerModel,
    fit_ngram,
    init_transformer,
    load_ngram,
    load_transformer,
    save_ngram,
    save_transformer,
)
from .schemes import (
    EXP,
    KGW,
    SCHEME_VARIANTS,
    UNIGRAM,
    SchemeConfig,
    context_seed,
    exp_sample,
    key_from_hex,
    partition_vocab,
    reweight_logits,
)
from .synth import ArithmeticTask, RecallTask, ToyVocabulary, build_vocabulary, make_task

__version__ = "0.1.0"

__all__ = [
    "AdaptiveConfig", "ArithmeticTask", "AttackConfig", "ATTACK_KINDS",
    "BenchConfig", "ConfigError", "DataError", "DetectionResult",
    "EvaluatorParams", "ExperimentConfig", "EXP", "KGW", "LabeledSample",
    "NGramConfig", "NGramModel", "RecallTask", "SCHEME_VARIANTS",
    "SchemeConfig", "ToyVocabulary", "TrainConfig", "TrainingError",
    "TransformerConfig", "TransformerModel", "UNIGRAM", "UsageError",
    "WmkitError", "apply_attack", "best_f1", "build_state_window",
    "build_vocabulary", "build_world", "context_seed", "derive_key", "detect",
    "detect_exp", "detect_green", "entropy_capacity", "enumerate_strategies",
    "evaluate_capacity", "evaluator_report", "exp_sample", "fit_ngram",
    "flip_evaluator", "gen_labels", "generate_greedy", "generate_sampled",
    "generate_wm", "generate_wm_entropy_gated", "generate_wm_plain",
    "init_transformer", "key_from_hex", "load_evaluator", "load_ngram",
    "load_transformer", "logit_delta_capacity", "make_constant_evaluator",
    "make_task", "partition_vocab", "replay_fingerprint", "reweight_logits",
    "roc_auc", "run_bench", "run_calibration", "run_robustness",
    "run_tradeoff", "save_evaluator", "save_ngram", "save_transformer",
    "train_evaluator", "write_report",
]
