"""Command line front end for the probe pipelines.

Exit codes: 0 success, 2 configuration or input format problems, 3 scorer
protocol or cache failures, 4 analysis failures. Flags override values from
an optional --config JSON file, which holds the same keys the resolved
config.json uses.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import analytics, bridge, corpus, paradigms, reporting, taxonomy
from .experiments import (
    EXPERIMENTS,
    ConfigError,
    ExperimentConfig,
    StageFailure,
    run_build_uniform,
    run_case_analogy,
    run_context_inference,
    run_induce_types,
    run_prompt_bias,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SCORER = 3
EXIT_ANALYSIS = 4


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with defaults for any flag")
    parser.add_argument("--out", help="output directory (required)")
    parser.add_argument("--seed", type=int, help="global random seed (default 0)")
    parser.add_argument("--force", action="store_true", default=None,
                        help="reuse a non-empty output directory")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def _add_scorer(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scorer-cmd", dest="scorer_cmd",
                        help="command line of a scorer speaking the line protocol")
    parser.add_argument("--model-id", dest="model_id",
                        help="replay from cache as this model, without a scorer")
    parser.add_argument("--cache-dir", dest="cache_dir",
                        help="score cache directory (default <out>/cache)")
    parser.add_argument("--no-cache", dest="no_cache", action="store_true", default=None,
                        help="bypass the score cache (debugging only)")
    parser.add_argument("--top-k", dest="top_k", type=int,
                        help="predictions requested per query (default 10)")
    parser.add_argument("--max-in-flight", dest="max_in_flight", type=int,
                        help="pipelined requests kept outstanding (default 8)")
    parser.add_argument("--timeout", type=float, help="scorer reply timeout in seconds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="probekit",
                                     description="Factual-knowledge probes for masked language models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-uniform", help="build a uniform-answer benchmark from a facts file")
    p.add_argument("--facts", help="five-column facts TSV")
    p.add_argument("--presample-cap", dest="presample_cap", type=int,
                   help="per-relation size cap before equalizing")
    _add_scorer(p)
    _add_common(p)
    p.set_defaults(handler=run_build_uniform, experiment="build-uniform")

    p = sub.add_parser("induce-types", help="induce each relation's answer type from a taxonomy")
    p.add_argument("--facts", help="five-column facts TSV")
    p.add_argument("--taxonomy", help="entity graph edges TSV (child, parent, kind)")
    p.add_argument("--labels", help="entity label TSV (id, label)")
    p.add_argument("--type-threshold", dest="type_threshold", type=float,
                   help="coverage fraction a type must strictly exceed (default 0.8)")
    _add_common(p)
    p.set_defaults(handler=run_induce_types, experiment="induce-types")

    p = sub.add_parser("run", help="run a probe experiment end to end")
    p.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    p.add_argument("--facts", help="five-column facts TSV (dataset A)")
    p.add_argument("--facts-b", dest="facts_b",
                   help="second facts TSV; defaults to the uniform subset of --facts")
    p.add_argument("--prompts", action="append",
                   help="prompt catalog as source=path (repeatable; bare path means manual)")
    p.add_argument("--taxonomy", help="entity graph edges TSV")
    p.add_argument("--labels", help="entity label TSV")
    p.add_argument("--contexts", help="retrieved contexts TSV (subject, relation, text)")
    p.add_argument("--cases", type=int, help="solved cases prepended per query (default 10)")
    p.add_argument("--type-threshold", dest="type_threshold", type=float,
                   help="coverage fraction a type must strictly exceed (default 0.8)")
    _add_scorer(p)
    _add_common(p)

    p = sub.add_parser("report", help="re-render report.md from an existing metrics.csv")
    p.add_argument("--metrics", required=True, help="metrics.csv produced by a run")
    p.add_argument("--md", required=True, help="markdown file to write")
    p.add_argument("--title", default="Metrics report")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


RUNNERS = {
    "prompt-bias": run_prompt_bias,
    "case-analogy": run_case_analogy,
    "context-inference": run_context_inference,
}


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    field_names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    merged: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file does not exist: {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - field_names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged.update(loaded)
    for name in field_names:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    if getattr(args, "experiment", None):
        merged["experiment"] = args.experiment
    if "prompts" in merged:
        merged["prompts"] = tuple(merged["prompts"])
    try:
        return ExperimentConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def classify(exc: BaseException) -> int:
    if isinstance(exc, StageFailure):
        exc = exc.cause
    if isinstance(exc, (ConfigError, corpus.FormatError)):
        return EXIT_CONFIG
    if isinstance(exc, (bridge.ScorerError, bridge.ProtocolError, bridge.CacheError)):
        return EXIT_SCORER
    if isinstance(
        exc,
        (analytics.AnalysisError, taxonomy.TaxonomyError, paradigms.QueryError,
         paradigms.CaseSamplingError),
    ):
        return EXIT_ANALYSIS
    raise exc  # genuinely unexpected; show the traceback


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "report":
            reporting.write_report(args.metrics, args.md, args.title)
            return EXIT_OK
        if args.command == "run":
            config = config_from_args(args)
            if config.experiment not in RUNNERS:
                raise ConfigError(f"unknown experiment {config.experiment!r}")
            RUNNERS[config.experiment](config)
            return EXIT_OK
        config = config_from_args(args)
        args.handler(config)
        return EXIT_OK
    except Exception as exc:  # classify known failures into exit codes
        code = classify(exc)
        if isinstance(exc, StageFailure):
            log.error("%s", exc)
        else:
            log.error("%s: %s", type(exc).__name__, exc)
        return code


if __name__ == "__main__":
    sys.exit(main())
