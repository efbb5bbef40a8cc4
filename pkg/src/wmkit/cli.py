"""Command-line interface.

Subcommands cover the full workflow: fit a toy backend, train the capacity
evaluator, generate (plain / capacity-gated / entropy-gated), detect, attack,
and run the built-in studies. Outputs are JSON on stdout; studies also write
schema-versioned report files under --out.

Exit codes: 0 success, 2 configuration/usage error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adaptive import (
    AdaptiveConfig,
    generate_greedy,
    generate_sampled,
    generate_wm,
    generate_wm_entropy_gated,
    generate_wm_plain,
)
from .attacks import ATTACK_KINDS, AttackConfig, apply_attack
from .capacity import load_evaluator, save_evaluator
from .detect import DEFAULT_Z_THRESHOLD, detect
from .errors import ConfigError, DataError, UsageError, WmkitError
from .experiments import (
    BenchConfig,
    ExperimentConfig,
    build_world,
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
    TransformerConfig,
    TransformerModel,
    fit_ngram,
    init_transformer,
    load_ngram,
    load_transformer,
    save_ngram,
    save_transformer,
)
from .schemes import SCHEME_VARIANTS, SchemeConfig, key_from_hex
from .synth import TASK_KINDS, build_vocabulary, make_task


def _parse_tokens(text: str) -> list[int]:
    """Token list from '1,2,3' or '@path' pointing at a JSON array."""
    if text.startswith("@"):
        try:
            data = json.loads(Path(text[1:]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read token file {text[1:]}: {exc}") from exc
        if not isinstance(data, list):
            raise DataError("token file must hold a JSON array")
        return [int(t) for t in data]
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad token list {text!r}: {exc}") from exc


def load_model(path: str | Path):
    """Load either backend by sniffing the file's `kind` field."""
    try:
        kind = json.loads(Path(path).read_text()).get("kind")
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    if kind == "ngram":
        return load_ngram(path)
    if kind == "transformer":
        return TransformerModel(load_transformer(path))
    raise DataError(f"unknown model kind {kind!r} in {path}")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, default=str))


def _scheme_from_args(args) -> SchemeConfig:
    return SchemeConfig(
        variant=args.variant,
        gamma=args.gamma,
        delta=args.delta,
        top_k=args.top_k,
        hash_window=args.hash_window,
    )


def _experiment_config(args) -> ExperimentConfig:
    data: dict = {}
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    for name in ("seed", "backend", "task", "n_eval", "n_label", "n_robust", "reps", "max_new"):
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    return ExperimentConfig.from_dict(data)


def cmd_fit_model(args) -> int:
    config = _experiment_config(args)
    vocab = build_vocabulary(config.vocab_size)
    task = make_task(config.task, vocab, seed=config.seed)
    if config.backend == "ngram":
        model = fit_ngram(task.training_corpus(seed=config.seed),
                          NGramConfig(config.vocab_size, config.order, config.alpha))
        save_ngram(model, args.model_out)
    else:
        params = init_transformer(TransformerConfig(
            vocab_size=config.vocab_size, d_model=config.d_model,
            n_layers=config.n_layers, n_heads=config.n_heads, seed=config.seed,
        ))
        save_transformer(params, args.model_out)
    _emit({"model": str(args.model_out), "backend": config.backend,
           "vocab_size": config.vocab_size})
    return 0


def cmd_train_evaluator(args) -> int:
    config = _experiment_config(args)
    world = build_world(config)
    save_evaluator(world.study.contextual.params, args.evaluator_out)
    report = evaluator_report(world)
    paths = write_report(report, args.out, "evaluator-study")
    _emit({
        "evaluator": str(args.evaluator_out),
        "report": str(paths["json"]),
        "fingerprint": replay_fingerprint(report),
        "rows": report["rows"],
    })
    return 0


def cmd_generate(args) -> int:
    model = load_model(args.model)
    if args.prompt is not None:
        prompt = _parse_tokens(args.prompt)
    else:
        vocab = build_vocabulary(model.vocab_size)
        task = make_task(args.task, vocab, seed=args.seed)
        rng = np.random.default_rng(args.seed)
        prompt = list(task.sample_case(rng).prompt)
    key = key_from_hex(args.key)

    trace: list | None = [] if args.trace else None
    if args.mode == "greedy":
        tokens = generate_greedy(model, prompt, args.max_new)
    elif args.mode == "sampled":
        tokens = generate_sampled(model, prompt, args.max_new, args.seed)
    elif args.mode == "plain":
        tokens = generate_wm_plain(model, prompt, key, _scheme_from_args(args), args.max_new)
    elif args.mode == "entropy":
        tokens = generate_wm_entropy_gated(
            model, prompt, key, _scheme_from_args(args), args.entropy_threshold, args.max_new,
        )
    else:  # caw
        if not args.evaluator:
            raise ConfigError("--evaluator is required for capacity-gated generation")
        evaluator = load_evaluator(args.evaluator)
        from .capacity import flip_evaluator

        adaptive = AdaptiveConfig(
            scheme=_scheme_from_args(args),
            evaluator=flip_evaluator(evaluator) if args.flip_evaluator else evaluator,
            theta=args.theta,
            beta=args.beta,
        )
        tokens = generate_wm(model, prompt, key, adaptive, args.max_new, trace=trace)
    if args.trace and trace is not None:
        with Path(args.trace).open("w") as fh:
            for record in trace:
                fh.write(json.dumps(record) + "\n")
    _emit({"prompt_len": len(prompt), "tokens": tokens})
    return 0


def cmd_detect(args) -> int:
    text = _parse_tokens(args.text)
    key = key_from_hex(args.key)
    result = detect(text, key, _scheme_from_args(args), args.vocab_size, args.z_threshold)
    _emit(result.to_dict())
    return 0


def cmd_attack(args) -> int:
    text = _parse_tokens(args.text)
    config = AttackConfig(kind=args.kind, p=args.p, seed=args.seed, top_k=args.top_k)
    classes = None
    if args.kind == "word-s":
        classes = build_vocabulary(args.vocab_size).synonym_classes()
    model = load_model(args.model) if args.model else None
    attacked = apply_attack(
        text, config, synonym_classes=classes, vocab_size=args.vocab_size, model=model,
    )
    _emit({"kind": args.kind, "p": args.p, "tokens": attacked})
    return 0


def _run_study(args, runner_name: str) -> int:
    config = _experiment_config(args)
    world = build_world(config)
    if runner_name == "tradeoff":
        report = run_tradeoff(world)
    elif runner_name == "calibration":
        report = run_calibration(world, n_class=args.n_class, n_null=args.n_null,
                                 horizon=args.horizon)
    elif runner_name == "robustness":
        report = run_robustness(world) if args.reps is None else run_robustness(world, reps=args.reps)
    else:  # evaluator study only
        report = evaluator_report(world)
    paths = write_report(report, args.out, report["kind"])
    _emit({
        "report": str(paths["json"]),
        "csv": str(paths["csv"]),
        "fingerprint": replay_fingerprint(report),
        "summary": report["summary"],
    })
    return 0


def cmd_bench(args) -> int:
    overrides = {
        name: value
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "prefix_len",
                     "new_tokens", "reps", "variant", "top_k", "seed")
        if (value := getattr(args, name)) is not None
    }
    config = BenchConfig(**overrides)
    report = run_bench(config)
    paths = write_report(report, args.out, "bench")
    _emit({
        "report": str(paths["json"]),
        "ratios": {k: report["timing"][k]
                   for k in ("plain_ratio", "tree_ratio", "sequential_ratio", "batch_ratio")},
        "baseline_ms_per_token": report["timing"]["baseline_ms_per_token"],
    })
    return 0


def cmd_gen_corpus(args) -> int:
    config = _experiment_config(args)
    vocab = build_vocabulary(config.vocab_size)
    task = make_task(config.task, vocab, seed=config.seed)
    cases = task.gen_corpus(args.n, seed=config.seed)
    out = Path(args.corpus_out)
    with out.open("w") as fh:
        for case in cases:
            fh.write(json.dumps({
                "prompt": list(case.prompt),
                "answer_value": case.answer_value,
                "answer_token": case.answer_token,
            }) + "\n")
    _emit({"corpus": str(out), "cases": len(cases)})
    return 0


def _add_scheme_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--variant", choices=sorted(SCHEME_VARIANTS), default="kgw")
    parser.add_argument("--gamma", type=float, default=0.25)
    parser.add_argument("--delta", type=float, default=4.0)
    parser.add_argument("--top-k", type=int, default=8)
    parser.add_argument("--hash-window", type=int, default=None)
    parser.add_argument("--key", default="000102030405060708090a0b0c0d0e0f",
                        help="watermark key as hex (>= 32 hex chars)")


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file of experiment-config overrides")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--backend", choices=("ngram", "transformer"), default=None)
    parser.add_argument("--task", choices=sorted(TASK_KINDS), default=None)
    parser.add_argument("--n-eval", type=int, default=None, dest="n_eval")
    parser.add_argument("--n-label", type=int, default=None, dest="n_label")
    parser.add_argument("--n-robust", type=int, default=None, dest="n_robust")
    parser.add_argument("--reps", type=int, default=None)
    parser.add_argument("--max-new", type=int, default=None, dest="max_new")
    parser.add_argument("--out", default="out", help="directory for report files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wmkit",
        description="Text watermarking with a learned per-position capacity gate, on toy models.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-model", help="fit or initialize a toy backend and save it")
    _add_config_args(p)
    p.add_argument("--model-out", required=True)
    p.set_defaults(func=cmd_fit_model)

    p = sub.add_parser("train-evaluator", help="label with the substitution oracle and train the gate")
    _add_config_args(p)
    p.add_argument("--evaluator-out", required=True)
    p.set_defaults(func=cmd_train_evaluator)

    p = sub.add_parser("generate", help="generate tokens from a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--prompt", help="comma-separated ids or @file.json; omit to sample a task prompt")
    p.add_argument("--task", choices=sorted(TASK_KINDS), default="arithmetic")
    p.add_argument("--mode", choices=("greedy", "sampled", "plain", "caw", "entropy"), default="caw")
    p.add_argument("--max-new", type=int, default=64, dest="max_new")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--entropy-threshold", type=float, default=0.5)
    p.add_argument("--evaluator", help="evaluator JSON (required for --mode caw)")
    p.add_argument("--flip-evaluator", action="store_true", default=True,
                   help="flip a tolerance-trained evaluator into gate orientation (default)")
    p.add_argument("--no-flip-evaluator", dest="flip_evaluator", action="store_false")
    p.add_argument("--trace", help="write per-position JSONL decision trace here")
    _add_scheme_args(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("detect", help="score a token sequence for the watermark")
    p.add_argument("--text", required=True, help="comma-separated ids or @file.json")
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--z-threshold", type=float, default=DEFAULT_Z_THRESHOLD)
    _add_scheme_args(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("attack", help="perturb a token sequence")
    p.add_argument("--text", required=True)
    p.add_argument("--kind", choices=sorted(ATTACK_KINDS), required=True)
    p.add_argument("--p", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--model", help="model file (required for word-s-context)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("study", help="evaluator quality vs entropy / top-2-gap baselines")
    _add_config_args(p)
    p.set_defaults(func=lambda a: _run_study(a, "study"))

    p = sub.add_parser("tradeoff", help="accuracy/detection table, matched pairs, Pareto check")
    _add_config_args(p)
    p.set_defaults(func=lambda a: _run_study(a, "tradeoff"))

    p = sub.add_parser("calibrate", help="large-sample detector calibration")
    _add_config_args(p)
    p.add_argument("--n-class", type=int, default=500, dest="n_class",
                   help="texts per class for the AUROC rows")
    p.add_argument("--n-null", type=int, default=1000, dest="n_null",
                   help="null texts for the false-positive-rate row")
    p.add_argument("--horizon", type=int, default=200,
                   help="tokens per text in the detection window")
    p.set_defaults(func=lambda a: _run_study(a, "calibration"))

    p = sub.add_parser("robustness", help="attack robustness, plain vs capacity-gated")
    _add_config_args(p)
    p.set_defaults(func=lambda a: _run_study(a, "robustness"))

    p = sub.add_parser("bench", help="decode-loop latency, greedy vs gated modes")
    p.add_argument("--out", default="out")
    p.add_argument("--vocab-size", type=int, default=None, dest="vocab_size")
    p.add_argument("--d-model", type=int, default=None, dest="d_model")
    p.add_argument("--n-layers", type=int, default=None, dest="n_layers")
    p.add_argument("--n-heads", type=int, default=None, dest="n_heads")
    p.add_argument("--prefix-len", type=int, default=None, dest="prefix_len")
    p.add_argument("--max-new", type=int, default=None, dest="new_tokens")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--variant", choices=sorted(SCHEME_VARIANTS), default=None)
    p.add_argument("--top-k", type=int, default=None, dest="top_k")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-corpus", help="write task prompt/answer cases as JSONL")
    _add_config_args(p)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--corpus-out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except WmkitError as exc:  # any future category defaults to config-style
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
