"""Command-line entry points: ingest, run, report, cache verify."""

from __future__ import annotations

import argparse
import sys

from . import llm, pipeline, retrieval

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_BACKEND = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autoct")
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="build a retrieval index from a JSONL corpus")
    p_ingest.add_argument("--corpus", required=True)
    p_ingest.add_argument("--out", required=True)
    p_ingest.add_argument("--embed-dim", type=int, default=256)

    p_run = sub.add_parser("run", help="execute the full search pipeline")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--resume", metavar="RUN_DIR", default=None)

    p_report = sub.add_parser("report", help="render a persisted run")
    p_report.add_argument("--run", required=True)
    p_report.add_argument("--trial", default=None)

    p_cache = sub.add_parser("cache", help="cache maintenance")
    cache_sub = p_cache.add_subparsers(dest="cache_command", required=True)
    p_verify = cache_sub.add_parser("verify", help="check cache and plan store digests")
    p_verify.add_argument("dir")

    return parser


def _cmd_ingest(args) -> int:
    try:
        index = retrieval.ingest_corpus_file(args.corpus, args.out, embed_dim=args.embed_dim)
    except (retrieval.RetrievalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"ingested {index.size} documents into {args.out}")
    return EXIT_OK


def _cmd_run(args) -> int:
    try:
        if args.resume:
            config = pipeline.parse_config(f"{args.resume}/config.ini")
            report = pipeline.run(config, resume=True)
        else:
            config = pipeline.parse_config(args.config)
            report = pipeline.run(config)
    except (pipeline.ConfigError, pipeline.InsufficientClass, pipeline.LockError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except llm.BackendError as exc:
        print(f"backend error: {exc} (partial results retained)", file=sys.stderr)
        return EXIT_BACKEND
    best = report.best
    print(
        f"best node {best['node']} model={best['selected_model']} "
        f"validation roc_auc={best['validation']['roc_auc']:.4f} "
        f"test roc_auc={best['test']['roc_auc']:.4f}"
    )
    return EXIT_OK


def _cmd_report(args) -> int:
    try:
        print(pipeline.report(args.run, trial=args.trial), end="")
    except pipeline.CorruptRun as exc:
        print(f"corrupt run: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def _cmd_cache_verify(args) -> int:
    from pathlib import Path

    problems: list[str] = []
    root = Path(args.dir)
    is_run_dir = (root / "tree.json").exists()
    if (root / "llm-cache").exists():
        problems.extend(llm.verify_cache(str(root / "llm-cache")))
    elif not is_run_dir:
        problems.extend(llm.verify_cache(str(root)))
    if is_run_dir:
        try:
            pipeline.verify_run_dir(str(root))
        except pipeline.CorruptRun as exc:
            problems.append(str(exc))
    for problem in problems:
        print(problem, file=sys.stderr)
    if problems:
        print(f"{len(problems)} problem(s) found", file=sys.stderr)
        return EXIT_ERROR
    print("cache ok")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "ingest":
        return _cmd_ingest(args)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "report":
        return _cmd_report(args)
    if args.command == "cache":
        return _cmd_cache_verify(args)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
