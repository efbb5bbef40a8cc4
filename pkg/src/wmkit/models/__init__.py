"""Toy language-model backends with a shared decode-session surface."""

from .base import (
    BATCH,
    PREGEN_MODES,
    SEQUENTIAL,
    TREE,
    DecodeSession,
    SessionCounters,
    check_dist,
    greedy_token,
    softmax,
)
from .ngram import NGramConfig, NGramModel, NGramSession, fit_ngram, load_ngram, save_ngram
from .transformer import (
    GenerationCache,
    TransformerConfig,
    TransformerModel,
    TransformerParams,
    TransformerSession,
    build_tree_mask,
    forward_next,
    init_transformer,
    load_transformer,
    save_transformer,
    tree_decode,
)

__all__ = [
    "BATCH",
    "PREGEN_MODES",
    "SEQUENTIAL",
    "TREE",
    "DecodeSession",
    "SessionCounters",
    "check_dist",
    "greedy_token",
    "softmax",
    "NGramConfig",
    "NGramModel",
    "NGramSession",
    "fit_ngram",
    "load_ngram",
    "save_ngram",
    "GenerationCache",
    "TransformerConfig",
    "TransformerModel",
    "TransformerParams",
    "TransformerSession",
    "build_tree_mask",
    "forward_next",
    "init_transformer",
    "load_transformer",
    "save_transformer",
    "tree_decode",
]
