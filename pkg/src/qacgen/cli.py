"""Single entry point wiring every pipeline stage behind subcommands."""

from __future__ import annotations

import argparse
import os
import sys
from collections.abc import Sequence

from . import QacError
from .align import (
    examples_from_corpus,
    init_policy,
    pairs_from_records,
    train_dpo,
    train_sft,
    write_metrics_csv,
)
from .config import ConfigError, EngineConfig, build_engine, load_config
from .context import Prefix
from .evaluation import evaluate_system, read_baseline, read_eval_set, write_report
from .generator import derive_seed, sample_candidate_lists
from .refine import RuleCritic, RuleReviser, refine_loop, write_sft_corpus
from .retrieval import build_query_index, load_query_log, save_index
from .reward import build_preference_pairs, score_list, write_pref_dataset, read_pref_dataset
from .serving import load_snapshot, pregenerate_cache, save_snapshot
from .httpapi import make_server

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _load_engine(args) -> tuple[EngineConfig, object]:
    if not args.config:
        raise ConfigError("--config is required for this subcommand")
    cfg = load_config(args.config)
    if args.template:
        if not os.path.exists(args.template):
            raise ConfigError(f"--template does not exist: {args.template}")
        cfg.template = os.path.abspath(args.template)
    engine = build_engine(cfg, seed=args.seed)
    return cfg, engine


def _sampling_profile(cfg: EngineConfig, engine, requested: str | None) -> str:
    if requested:
        if requested not in engine.generators:
            raise ConfigError(f"unknown generator profile {requested!r}")
        return requested
    if "sampler" in engine.generators:
        return "sampler"
    return cfg.compact_profile


def cmd_build_index(args) -> int:
    index = build_query_index(load_query_log(args.log))
    _ensure_parent(args.out)
    count = save_index(index, args.out)
    print(f"wrote {count} entries to {args.out}")
    return EXIT_OK


def cmd_pregenerate(args) -> int:
    cfg, engine = _load_engine(args)
    prefixes = [
        Prefix(text=p.text, traffic_weight=p.weight) for p in read_eval_set(args.prefixes)
    ]
    snapshot, report = pregenerate_cache(
        engine, prefixes, profile_name=args.profile or cfg.large_profile,
        timestamp=args.timestamp,
    )
    out = args.out or cfg.snapshot
    if not out:
        raise ConfigError("no snapshot output path (--out or paths.snapshot)")
    _ensure_parent(out)
    save_snapshot(snapshot, out)
    print(f"cached {report.built} prefixes to {out}; skipped {len(report.skipped)}")
    for prefix, reason in report.skipped:
        print(f"  skipped {prefix!r}: {reason}")
    return EXIT_OK


def cmd_serve(args) -> int:
    cfg, engine = _load_engine(args)
    snapshot_path = args.snapshot or cfg.snapshot
    if snapshot_path and os.path.exists(snapshot_path):
        version = engine.swap_snapshot(load_snapshot(snapshot_path))
        print(f"loaded snapshot {snapshot_path} as version {version}")
    server = make_server(engine, host=args.host, port=args.port)
    host, port = server.server_address[:2]
    print(f"serving on http://{host}:{port} (Ctrl+C to stop)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_refine(args) -> int:
    cfg, engine = _load_engine(args)
    profile_name = _sampling_profile(cfg, engine, args.profile)
    profile, generator = engine.generators[profile_name]
    critic = RuleCritic(engine.suite.safety_classifier)
    reviser = RuleReviser(engine.suite.safety_classifier)
    traces = []
    for eval_prefix in read_eval_set(args.prefixes):
        context = engine.build_context(Prefix(text=eval_prefix.text))
        trace = refine_loop(
            context,
            generator,
            critic,
            reviser,
            max_rounds=args.max_rounds,
            template=engine.template,
            seed=derive_seed(profile.seed, "refine", eval_prefix.text),
        )
        traces.append(trace)
    _ensure_parent(args.out)
    count = write_sft_corpus(traces, args.out)
    failed = sum(1 for t in traces if t.failed)
    print(f"wrote {count} refined examples to {args.out} ({failed} failed traces)")
    return EXIT_OK


def cmd_mine_prefs(args) -> int:
    cfg, engine = _load_engine(args)
    profile_name = _sampling_profile(cfg, engine, args.profile)
    profile, generator = engine.generators[profile_name]
    delta = args.delta if args.delta is not None else cfg.delta
    top_k = args.k if args.k is not None else cfg.top_k
    all_pairs = []
    for eval_prefix in read_eval_set(args.prefixes):
        context = engine.build_context(Prefix(text=eval_prefix.text))
        prompt = engine.render(context)
        batch = sample_candidate_lists(generator, profile, prompt.rendered, args.samples)
        scored = [
            score_list(eval_prefix.text, raw, context, engine.suite, engine.weights)
            for raw in batch.outputs
        ]
        all_pairs.extend(build_preference_pairs(prompt.rendered, scored, delta, top_k))
    _ensure_parent(args.out)
    count = write_pref_dataset(all_pairs, args.out)
    print(f"wrote {count} preference pairs to {args.out}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    cfg = load_config(args.config) if args.config else EngineConfig()
    beta = args.beta if args.beta is not None else cfg.beta
    steps = args.steps if args.steps is not None else cfg.steps
    step_size = args.step_size if args.step_size is not None else cfg.step_size
    init_seed = args.seed if args.seed is not None else cfg.align_seed
    if args.corpus:
        from .refine import read_sft_corpus

        examples, vocab = examples_from_corpus(read_sft_corpus(args.corpus))
        if not examples:
            raise QacError(f"no usable examples in {args.corpus}")
        policy = init_policy(vocab, seed=init_seed)
        history = train_sft(policy, examples, step_size=step_size, steps=steps)
        mode = "sft"
    else:
        pairs, vocab = pairs_from_records(read_pref_dataset(args.pairs))
        if not pairs:
            raise QacError(f"no usable pairs in {args.pairs}")
        policy = init_policy(vocab, seed=init_seed)
        reference = policy.clone()
        history = train_dpo(
            policy, reference, pairs, beta=beta, step_size=step_size, steps=steps
        )
        mode = "dpo"
    _ensure_parent(args.out)
    write_metrics_csv(history, args.out)
    print(
        f"{mode}: {len(history) - 1} steps, loss {history[0].loss:.6f} -> {history[-1].loss:.6f}; "
        f"metrics in {args.out}"
    )
    if args.figures:
        from .figures import render_loss_curve

        figure_path = os.path.splitext(args.out)[0] + "_loss.png"
        render_loss_curve(history, figure_path, title=f"toy {mode} loss")
        print(f"figure in {figure_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, engine = _load_engine(args)
    snapshot_path = args.snapshot or cfg.snapshot
    if snapshot_path and os.path.exists(snapshot_path):
        engine.swap_snapshot(load_snapshot(snapshot_path))
    prefixes = read_eval_set(args.prefixes)
    baseline = read_baseline(args.baseline) if args.baseline else None

    def serve(prefix_text: str) -> tuple[str, ...]:
        return engine.serve_complete(prefix_text).suggestions.queries

    def context_for(prefix_text: str):
        return engine.build_context(Prefix(text=prefix_text))

    report = evaluate_system(
        prefixes, serve, context_for, engine.suite, baseline, system=args.system_name
    )
    _ensure_parent(args.out)
    write_report([report], args.out, fmt=args.format)
    print(f"wrote {args.format} report to {args.out}")
    if args.figures:
        from .figures import render_metric_bars

        figure_path = os.path.splitext(args.out)[0] + "_metrics.png"
        render_metric_bars([report], figure_path)
        print(f"figure in {figure_path}")
    return EXIT_OK


def cmd_score(args) -> int:
    cfg, engine = _load_engine(args)
    context = engine.build_context(Prefix(text=args.prefix))
    prompt = engine.render(context)
    if args.raw:
        with open(args.raw, encoding="utf-8") as handle:
            raw = handle.read()
    else:
        raw = engine.generate(args.profile or cfg.compact_profile, prompt.rendered)
    scored = score_list(args.prefix, raw, context, engine.suite, engine.weights)
    print(f"prefix: {args.prefix!r}")
    print(f"raw output:\n{raw}\n")
    scores = scored.scores
    rows = [
        ("format_ok", scores.format_ok),
        ("relevance", scores.relevance),
        ("engagement", scores.engagement),
        ("safety", scores.safety),
        ("catalog_grounded", scores.catalog_grounded),
        ("context_grounded", scores.context_grounded),
        ("diversity", scores.diversity),
    ]
    for name, value in rows:
        print(f"  {name:18s} {value:.6f}" if isinstance(value, float) else f"  {name:18s} {value}")
    if scored.format_error is not None:
        print(f"  format error: {scored.format_error}")
    print(f"gated reward: {scored.reward:.6f}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="qac", description=__doc__)
    parser.add_argument("--config", help="TOML config file", default=None)
    parser.add_argument("--seed", type=int, default=None, help="global seed for all randomness")
    parser.add_argument(
        "--template", default=None, help="prompt template file overriding paths.template"
    )
    # the same flags are accepted after the subcommand; SUPPRESS keeps an
    # absent post-subcommand flag from clobbering a pre-subcommand value
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", default=argparse.SUPPRESS)
    shared.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    shared.add_argument("--template", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-index", parents=[shared], help="merge a query log into a prefix index artifact")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("pregenerate", parents=[shared], help="pre-generate and cache suggestions offline")
    p.add_argument("--prefixes", required=True, help="JSONL {prefix, weight, stratum}")
    p.add_argument("--out", default=None)
    p.add_argument("--profile", default=None)
    p.add_argument("--timestamp", type=float, default=0.0)
    p.set_defaults(func=cmd_pregenerate)

    p = sub.add_parser("serve", parents=[shared], help="run the HTTP completion service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--snapshot", default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("refine", parents=[shared], help="critique-and-revise synthetic data generation")
    p.add_argument("--prefixes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-rounds", type=int, default=3)
    p.add_argument("--profile", default=None)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("mine-prefs", parents=[shared], help="sample, score, and mine preference pairs")
    p.add_argument("--prefixes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--profile", default=None)
    p.set_defaults(func=cmd_mine_prefs)

    p = sub.add_parser("train-toy", parents=[shared], help="tabular-policy training on mined data")
    p.add_argument("--pairs", default=None, help="preference JSONL (preference objective)")
    p.add_argument("--corpus", default=None, help="refinement corpus JSONL (supervised)")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--figures", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("eval", parents=[shared], help="traffic-weighted offline evaluation")
    p.add_argument("--prefixes", required=True)
    p.add_argument("--baseline", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("json", "markdown-table"), default="markdown-table")
    p.add_argument("--snapshot", default=None)
    p.add_argument("--system-name", default="qacgen")
    p.add_argument("--figures", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", parents=[shared], help="score one prefix end to end (debugging)")
    p.add_argument("--prefix", required=True)
    p.add_argument("--raw", default=None, help="score this file instead of generating")
    p.add_argument("--profile", default=None)
    p.set_defaults(func=cmd_score)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "train-toy" and not (args.pairs or args.corpus):
            parser.error("train-toy needs --pairs or --corpus")
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except QacError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
