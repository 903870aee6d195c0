"""Experiment pipelines gluing corpus, sampling, scoring, and analytics.

Each runner loads its inputs, builds probe queries, resolves them through
the score cache, computes its metric battery, and emits metrics.csv plus a
rendered report and every intermediate artifact into the output directory.
Instances are keyed by their fact triple so paired runs line up even when
two facts share a probe text.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

from . import analytics, bridge, corpus, paradigms, sampler, taxonomy
from .reporting import ALL, MACRO, MetricsReport, write_report
from .seeding import derive_seed

log = logging.getLogger(__name__)

EXPERIMENTS = ("prompt-bias", "case-analogy", "context-inference")


class ConfigError(ValueError):
    """The run configuration is unusable (bad paths, missing pieces)."""


class StageFailure(RuntimeError):
    """A pipeline stage failed; artifacts written so far stay on disk."""

    def __init__(self, stage_name: str, cause: BaseException):
        super().__init__(f"stage {stage_name} failed: {cause}")
        self.stage_name = stage_name
        self.cause = cause


@contextmanager
def stage(name: str):
    try:
        yield
    except StageFailure:
        raise
    except Exception as exc:
        raise StageFailure(name, exc) from exc


@dataclass
class ExperimentConfig:
    """Everything a run needs; written as config.json next to the outputs."""

    experiment: str = ""
    facts: str = ""
    facts_b: str = ""
    prompts: tuple[str, ...] = ()  # entries like "manual=prompts.tsv"
    taxonomy: str = ""
    labels: str = ""
    contexts: str = ""
    scorer_cmd: str = ""
    model_id: str = ""  # enables cache-only replay without a scorer command
    cache_dir: str = ""
    seed: int = 0
    top_k: int = 10
    cases: int = 10
    type_threshold: float = 0.8
    presample_cap: int = sampler.DEFAULT_PRESAMPLE_CAP
    max_in_flight: int = 8
    timeout: float = 120.0
    out: str = ""
    no_cache: bool = False
    force: bool = False

    def prompt_catalogs(self) -> list[tuple[str, str]]:
        catalogs = []
        for entry in self.prompts:
            source, eq, path = entry.partition("=")
            if not eq:
                source, path = "manual", entry
            if source not in corpus.PROMPT_SOURCES:
                raise ConfigError(f"unknown prompt source {source!r} in {entry!r}")
            catalogs.append((source, path))
        if len({source for source, _ in catalogs}) != len(catalogs):
            raise ConfigError("each prompt source may be given only once")
        return catalogs


def _require(config: ExperimentConfig, **paths: str) -> None:
    for flag, path in paths.items():
        if not path:
            raise ConfigError(f"--{flag} is required for this run")
        if not Path(path).exists():
            raise ConfigError(f"--{flag} path does not exist: {path}")


def prepare_out(config: ExperimentConfig) -> Path:
    if not config.out:
        raise ConfigError("--out is required")
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    if any(out.iterdir()) and not config.force:
        raise ConfigError(f"output directory {out} is not empty (use --force to reuse)")
    resolved = dataclasses.asdict(config)
    (out / "config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return out


def open_backend(config: ExperimentConfig):
    if config.scorer_cmd:
        return bridge.SubprocessScorer(config.scorer_cmd, timeout=config.timeout)
    if config.model_id:
        log.info("no scorer command; replaying from cache as model %s", config.model_id)
        return bridge.OfflineScorer(config.model_id)
    raise ConfigError("--scorer-cmd (or --model-id with a warm cache) is required")


def open_cache(config: ExperimentConfig, out: Path) -> bridge.PredictionCache | None:
    if config.no_cache:
        log.warning("running without the score cache; this is for protocol debugging only")
        return None
    cache_dir = Path(config.cache_dir) if config.cache_dir else out / "cache"
    cache_dir.mkdir(parents=True, exist_ok=True)
    return bridge.PredictionCache(cache_dir / "scores.tsv")


@dataclass(frozen=True)
class Instance:
    """One evaluation row: a fact probed by one query."""

    instance_id: str
    relation_id: str
    gold: str
    query: paradigms.Query


def make_instance(fact: corpus.Fact, query: paradigms.Query) -> Instance:
    key = f"{fact.subject_id}|{fact.relation_id}|{fact.object_id}"
    return Instance(key, fact.relation_id, fact.object_label, query)


def build_requests(queries: Iterable[paradigms.Query], top_k: int) -> list[bridge.ScoreRequest]:
    """Score requests deduplicated by query id, input order preserved."""
    seen: dict[str, bridge.ScoreRequest] = {}
    for query in queries:
        if query.query_id not in seen:
            seen[query.query_id] = bridge.ScoreRequest(
                query.query_id, query.text, query.target_mask_index, top_k
            )
    return list(seen.values())


def resolve_records(
    instances: Sequence[Instance], scored: Mapping[str, bridge.PredictionRecord]
) -> dict[str, bridge.PredictionRecord]:
    """Re-key shared query records by instance, so paired runs align."""
    return {
        inst.instance_id: dataclasses.replace(
            scored[inst.query.query_id], query_id=inst.instance_id
        )
        for inst in instances
    }


def _by_relation(
    instances: Sequence[Instance], records: Mapping[str, bridge.PredictionRecord]
) -> dict[str, list[bridge.PredictionRecord]]:
    grouped: dict[str, list[bridge.PredictionRecord]] = {}
    for inst in instances:
        grouped.setdefault(inst.relation_id, []).append(records[inst.instance_id])
    return grouped


def _golds(instances: Sequence[Instance]) -> dict[str, str]:
    return {inst.instance_id: inst.gold for inst in instances}


def _write_queries(queries: Iterable[paradigms.Query], path: Path) -> None:
    unique = {q.query_id: q for q in queries}
    paradigms.write_queries(
        (unique[qid] for qid in sorted(unique)), path
    )


def _load_factsets(path: str) -> dict[str, corpus.FactSet]:
    return {fs.relation_id: fs for fs in corpus.load_facts(path)}


# ---------------------------------------------------------------- prompt bias


def run_prompt_bias(config: ExperimentConfig, backend=None) -> MetricsReport:
    """Compare model behavior on two datasets of the same relations.

    Dataset A comes from --facts; dataset B from --facts-b when given,
    otherwise it is the uniform-answer subset derived from A. Emits answer
    and prediction coverage, dataset-vs-dataset prediction correlations,
    prompt-only correlations and KL, and precision per prompt catalog.
    """
    _require(config, facts=config.facts)
    if config.facts_b:
        _require(config, facts_b=config.facts_b)
    catalogs = config.prompt_catalogs()
    if not catalogs:
        raise ConfigError("at least one --prompts catalog is required")
    for _, path in catalogs:
        _require(config, prompts=path)
    out = prepare_out(config)
    report = MetricsReport()

    with stage("load-inputs"):
        facts_a = _load_factsets(config.facts)
        if config.facts_b:
            facts_b = _load_factsets(config.facts_b)
        else:
            facts_b = {}
            for relation_id, factset in sorted(facts_a.items()):
                subset, _ = sampler.build_uniform_subset(
                    factset, derive_seed(config.seed, "uniform", relation_id)
                )
                facts_b[relation_id] = subset
        templates = {
            source: corpus.load_prompts(path, source) for source, path in catalogs
        }

    with stage("build-queries"):
        runs: dict[str, dict] = {}
        for source, catalog in sorted(templates.items()):
            relations = sorted(set(facts_a) & set(facts_b) & set(catalog))
            if not relations:
                raise ConfigError(f"no relation appears in both datasets and catalog {source}")
            instances_a: list[Instance] = []
            instances_b: list[Instance] = []
            prompt_only: dict[str, paradigms.Query] = {}
            for relation_id in relations:
                template = catalog[relation_id]
                for fact in facts_a[relation_id]:
                    instances_a.append(make_instance(fact, paradigms.build_prompt_query(fact, template)))
                for fact in facts_b[relation_id]:
                    instances_b.append(make_instance(fact, paradigms.build_prompt_query(fact, template)))
                prompt_only[relation_id] = paradigms.build_prompt_only_query(template)
            runs[source] = {
                "relations": relations,
                "a": instances_a,
                "b": instances_b,
                "prompt_only": prompt_only,
            }

    owns_backend = backend is None
    if owns_backend:
        with stage("connect-scorer"):
            backend = open_backend(config)
    cache = open_cache(config, out)
    try:
        with stage("score"):
            all_queries: list[paradigms.Query] = []
            for run in runs.values():
                all_queries.extend(inst.query for inst in run["a"])
                all_queries.extend(inst.query for inst in run["b"])
                all_queries.extend(run["prompt_only"].values())
            requests = build_requests(all_queries, config.top_k)
            scored = bridge.score_all(requests, backend, cache, config.max_in_flight)

        with stage("analyze"):
            distribution_lines: list[str] = []

            def emit_distribution(source: str, relation_id: str, series: str, dist) -> None:
                for token, weight in sorted(dist.weights.items()):
                    distribution_lines.append(
                        f"{source}\t{relation_id}\t{series}\t{token}\t{weight:.10g}"
                    )

            for source, run in sorted(runs.items()):
                records_a = resolve_records(run["a"], scored)
                records_b = resolve_records(run["b"], scored)
                golds = _golds(run["a"]) | _golds(run["b"])
                rel_a = _by_relation(run["a"], records_a)
                rel_b = _by_relation(run["b"], records_b)
                for relation_id in run["relations"]:
                    answers_a = sampler.answer_histogram(facts_a[relation_id])
                    answers_b = sampler.answer_histogram(facts_b[relation_id])
                    hist_a = analytics.prediction_histogram(rel_a[relation_id])
                    hist_b = analytics.prediction_histogram(rel_b[relation_id])
                    weighted_a = analytics.prediction_histogram(rel_a[relation_id], weight_by_probability=True)
                    weighted_b = analytics.prediction_histogram(rel_b[relation_id], weight_by_probability=True)
                    po_record = scored[run["prompt_only"][relation_id].query_id]
                    po_dist = analytics.record_distribution(po_record)

                    emit_distribution(source, relation_id, "answers_a", answers_a)
                    emit_distribution(source, relation_id, "answers_b", answers_b)
                    emit_distribution(source, relation_id, "predictions_a", hist_a)
                    emit_distribution(source, relation_id, "predictions_b", hist_b)
                    emit_distribution(source, relation_id, "prompt_only", po_dist)

                    section = f"coverage[{source}]"
                    n_a, n_b = len(facts_a[relation_id]), len(facts_b[relation_id])
                    for k in (1, 3, 5):
                        report.add(section, relation_id, f"answers_top{k}_a", analytics.topk_coverage(answers_a, n_a, k), n_a)
                        report.add(section, relation_id, f"answers_top{k}_b", analytics.topk_coverage(answers_b, n_b, k), n_b)
                        report.add(section, relation_id, f"predictions_top{k}_a", analytics.topk_coverage(hist_a, n_a, k), n_a)
                        report.add(section, relation_id, f"predictions_top{k}_b", analytics.topk_coverage(hist_b, n_b, k), n_b)

                    section = f"correlation[{source}]"
                    report.add(section, relation_id, "pred_hist_a_vs_b", _corr_or_none(hist_a, hist_b))
                    report.add(section, relation_id, "prompt_only_vs_full_a", _corr_or_none(po_dist, weighted_a))
                    report.add(section, relation_id, "prompt_only_vs_full_b", _corr_or_none(po_dist, weighted_b))

                    section = f"prompt_fitness[{source}]"
                    report.add(section, relation_id, "kl_answers_a_vs_prompt_only", analytics.kl_divergence(answers_a, po_dist))
                    report.add(section, relation_id, "p1_a", analytics.precision_at_k(rel_a[relation_id], golds, 1), n_a)
                    report.add(section, relation_id, "p1_b", analytics.precision_at_k(rel_b[relation_id], golds, 1), n_b)

                for section_metric in _macro_metrics(report, source):
                    report.add_macro(*section_metric)

        with stage("emit"):
            queries_dir = out / "queries"
            queries_dir.mkdir(exist_ok=True)
            for source, run in sorted(runs.items()):
                _write_queries((i.query for i in run["a"]), queries_dir / f"{source}_prompt_a.tsv")
                _write_queries((i.query for i in run["b"]), queries_dir / f"{source}_prompt_b.tsv")
                _write_queries(run["prompt_only"].values(), queries_dir / f"{source}_prompt_only.tsv")
            (out / "distributions.tsv").write_text(
                "".join(line + "\n" for line in sorted(distribution_lines)), encoding="utf-8"
            )
            report.to_csv(out / "metrics.csv")
            write_report(out / "metrics.csv", out / "report.md", "Prompt bias metrics")
    finally:
        if owns_backend and backend is not None:
            backend.close()
    return report


def _corr_or_none(d1, d2) -> float | None:
    try:
        return analytics.distribution_correlation(d1, d2)
    except analytics.UndefinedCorrelationError as exc:
        log.warning("correlation undefined: %s", exc)
        return None


def _macro_metrics(report: MetricsReport, source: str) -> list[tuple[str, str]]:
    wanted = []
    seen = set()
    for row in report.rows:
        if row.relation in (MACRO, ALL):
            continue
        if f"[{source}]" not in row.section:
            continue
        key = (row.section, row.metric)
        if key not in seen and row.value is not None:
            seen.add(key)
            wanted.append(key)
    return wanted


# --------------------------------------------------------------- case analogy


def run_case_analogy(config: ExperimentConfig, backend=None) -> MetricsReport:
    """Prepend solved cases of the same relation and measure what moves.

    Requires a taxonomy to induce each relation's answer type; relations
    whose induction fails keep their precision metrics but drop out of the
    type-level analysis.
    """
    _require(config, facts=config.facts, taxonomy=config.taxonomy)
    catalogs = config.prompt_catalogs()
    if len(catalogs) != 1:
        raise ConfigError("case analogy uses exactly one prompt catalog")
    _require(config, prompts=catalogs[0][1])
    out = prepare_out(config)
    report = MetricsReport()

    with stage("load-inputs"):
        factsets = _load_factsets(config.facts)
        source, prompts_path = catalogs[0]
        catalog = corpus.load_prompts(prompts_path, source)
        store = taxonomy.load_taxonomy(config.taxonomy, config.labels or None)

    with stage("build-queries"):
        prompt_instances: list[Instance] = []
        case_instances: list[Instance] = []
        skipped: dict[str, int] = {}
        relations = sorted(set(factsets) & set(catalog))
        if not relations:
            raise ConfigError("no relation appears in both the facts and the catalog")
        for relation_id in relations:
            template = catalog[relation_id]
            factset = factsets[relation_id]
            for fact in factset:
                try:
                    cases = paradigms.sample_cases(
                        factset,
                        fact,
                        n=config.cases,
                        seed=derive_seed(config.seed, "cases", fact.subject_id, relation_id),
                    )
                except paradigms.CaseSamplingError as exc:
                    skipped[relation_id] = skipped.get(relation_id, 0) + 1
                    log.info("skipping %s: %s", fact.key, exc)
                    continue
                prompt_instances.append(make_instance(fact, paradigms.build_prompt_query(fact, template)))
                case_instances.append(make_instance(fact, paradigms.build_case_query(fact, cases, template)))
        if not prompt_instances:
            raise ConfigError("no fact has enough eligible cases; lower --cases")
        for relation_id, count in sorted(skipped.items()):
            report.add("case_sampling", relation_id, "skipped_instances", count)

    with stage("induce-types"):
        assignments: dict[str, taxonomy.TypeAssignment] = {}
        etgs: dict[str, taxonomy.EntityTypeGraph] = {}
        for relation_id in relations:
            seeds = sorted({f.object_id for f in factsets[relation_id]})
            try:
                etg = taxonomy.condense_cycles(taxonomy.build_etg(seeds, store))
                order = taxonomy.fine_to_coarse_order(etg)
                assignment = taxonomy.induce_type(order, etg, config.type_threshold, relation_id)
            except (taxonomy.TypeInductionError, taxonomy.CycleError, ValueError) as exc:
                log.warning("type induction failed for %s: %s", relation_id, exc)
                report.add("type_induction", relation_id, "coverage_fraction", None)
                continue
            assignments[relation_id] = assignment
            etgs[relation_id] = etg
            report.add("type_induction", relation_id, "coverage_fraction", assignment.coverage_fraction)
        taxonomy.write_type_assignments(assignments.values(), out / "types.tsv")

    owns_backend = backend is None
    if owns_backend:
        with stage("connect-scorer"):
            backend = open_backend(config)
    cache = open_cache(config, out)
    try:
        with stage("score"):
            requests = build_requests(
                [i.query for i in prompt_instances] + [i.query for i in case_instances],
                config.top_k,
            )
            scored = bridge.score_all(requests, backend, cache, config.max_in_flight)

        with stage("analyze"):
            before = resolve_records(prompt_instances, scored)
            after = resolve_records(case_instances, scored)
            golds = _golds(prompt_instances)
            rel_before = _by_relation(prompt_instances, before)
            rel_after = _by_relation(case_instances, after)
            inst_by_rel: dict[str, list[Instance]] = {}
            for inst in prompt_instances:
                inst_by_rel.setdefault(inst.relation_id, []).append(inst)

            outcomes_before: dict[str, analytics.RankOutcome] = {}
            outcomes_after: dict[str, analytics.RankOutcome] = {}
            typed_before_records: list[bridge.PredictionRecord] = []
            typed_after_records: list[bridge.PredictionRecord] = []
            typed_filters: dict[str, frozenset[str]] = {}

            for relation_id in sorted(rel_before):
                n = len(rel_before[relation_id])
                p1_before = analytics.precision_at_k(rel_before[relation_id], golds, 1)
                p1_after = analytics.precision_at_k(rel_after[relation_id], golds, 1)
                report.add("precision", relation_id, "p1_prompt", p1_before, n)
                report.add("precision", relation_id, "p1_case", p1_after, n)

                members: frozenset[str] | None = None
                if relation_id in assignments:
                    candidates = {golds[i.instance_id] for i in inst_by_rel[relation_id]}
                    for record in rel_before[relation_id] + rel_after[relation_id]:
                        candidates.update(token for token, _ in record.predictions)
                    members = frozenset(
                        taxonomy.type_members(
                            assignments[relation_id].type_id, candidates, store, etgs[relation_id]
                        )
                    )
                    typed_filters[relation_id] = members
                    row = analytics.type_transition_analysis(
                        rel_before[relation_id], rel_after[relation_id], golds, members, relation_id
                    )
                    report.add("type_transition", relation_id, "precision_delta", row.precision_delta, row.queries)
                    report.add("type_transition", relation_id, "type_precision_delta", row.type_precision_delta, row.queries)
                    report.add("type_transition", relation_id, "wrong_to_right", row.wrong_to_right)
                    report.add("type_transition", relation_id, "right_to_wrong", row.right_to_wrong)
                    report.add(
                        "type_transition", relation_id, "wrong_to_right_with_type_change",
                        row.wrong_to_right_with_type_change, row.wrong_to_right,
                    )
                    report.add(
                        "type_transition", relation_id, "right_to_wrong_without_type_change",
                        row.right_to_wrong_without_type_change, row.right_to_wrong,
                    )
                    report.add(
                        "in_type_mrr", relation_id, "mrr_prompt",
                        analytics.mrr(rel_before[relation_id], golds, members), n,
                    )
                    report.add(
                        "in_type_mrr", relation_id, "mrr_case",
                        analytics.mrr(rel_after[relation_id], golds, members), n,
                    )
                    typed_before_records.extend(rel_before[relation_id])
                    typed_after_records.extend(rel_after[relation_id])

                for inst in inst_by_rel[relation_id]:
                    outcomes_before[inst.instance_id] = analytics.rank_outcome(
                        before[inst.instance_id], golds[inst.instance_id], members
                    )
                    outcomes_after[inst.instance_id] = analytics.rank_outcome(
                        after[inst.instance_id], golds[inst.instance_id], members
                    )

            report.add_macro("precision", "p1_prompt")
            report.add_macro("precision", "p1_case")

            all_before = list(before.values())
            all_after = list(after.values())
            flips_better = sum(
                1
                for inst_id in before
                if before[inst_id].top1() != golds[inst_id] and after[inst_id].top1() == golds[inst_id]
            )
            flips_worse = sum(
                1
                for inst_id in before
                if before[inst_id].top1() == golds[inst_id] and after[inst_id].top1() != golds[inst_id]
            )
            total = len(before)
            report.add("flips", ALL, "improved_pct", 100.0 * flips_better / total, total)
            report.add("flips", ALL, "worsened_pct", 100.0 * flips_worse / total, total)
            report.add("precision", ALL, "p1_prompt_micro", analytics.precision_at_k(all_before, golds, 1), total)
            report.add("precision", ALL, "p1_case_micro", analytics.precision_at_k(all_after, golds, 1), total)

            overall = analytics.rank_change_analysis(outcomes_before, outcomes_after, "overall_rank")
            report.add("rank_change", ALL, "overall_raised", overall.raised, overall.compared)
            report.add("rank_change", ALL, "overall_unchanged", overall.unchanged, overall.compared)
            report.add("rank_change", ALL, "overall_dropped", overall.dropped, overall.compared)
            if typed_filters:
                try:
                    in_type = analytics.rank_change_analysis(outcomes_before, outcomes_after, "in_type_rank")
                    report.add("rank_change", ALL, "in_type_raised", in_type.raised, in_type.compared)
                    report.add("rank_change", ALL, "in_type_unchanged", in_type.unchanged, in_type.compared)
                    report.add("rank_change", ALL, "in_type_dropped", in_type.dropped, in_type.compared)
                except analytics.AnalysisError as exc:
                    log.warning("no in-type rank pairs: %s", exc)
                report.add(
                    "in_type_mrr", ALL, "mrr_prompt",
                    _micro_in_type_mrr(typed_before_records, golds, typed_filters), len(typed_before_records),
                )
                report.add(
                    "in_type_mrr", ALL, "mrr_case",
                    _micro_in_type_mrr(typed_after_records, golds, typed_filters), len(typed_after_records),
                )

        with stage("emit"):
            queries_dir = out / "queries"
            queries_dir.mkdir(exist_ok=True)
            _write_queries((i.query for i in prompt_instances), queries_dir / "prompt.tsv")
            _write_queries((i.query for i in case_instances), queries_dir / "case.tsv")
            report.to_csv(out / "metrics.csv")
            write_report(out / "metrics.csv", out / "report.md", "Case analogy metrics")
    finally:
        if owns_backend and backend is not None:
            backend.close()
    return report


def _micro_in_type_mrr(
    records: Sequence[bridge.PredictionRecord],
    golds: Mapping[str, str],
    filters: Mapping[str, frozenset[str]],
) -> float:
    """MRR across relations where each record uses its relation's type filter."""
    if not records:
        raise analytics.AnalysisError("MRR over zero records is undefined")
    total = 0.0
    for record in records:
        relation_id = record.query_id.split("|")[1]
        rank = analytics.gold_rank(record, golds[record.query_id], filters[relation_id])
        if rank is not None:
            total += 1.0 / rank
    return total / len(records)


# ---------------------------------------------------------- context inference


def run_context_inference(config: ExperimentConfig, backend=None) -> MetricsReport:
    """Prepend retrieved contexts and expose how much of the gain is leakage.

    Runs four paradigms per instance (prompt, context, answer-masked
    context, reconstruction of the masked answer) and reports the leakage
    split, the overall macro triple, and the reconstruction split.
    """
    _require(config, facts=config.facts, contexts=config.contexts)
    catalogs = config.prompt_catalogs()
    if len(catalogs) != 1:
        raise ConfigError("context inference uses exactly one prompt catalog")
    _require(config, prompts=catalogs[0][1])
    out = prepare_out(config)
    report = MetricsReport()

    with stage("load-inputs"):
        factsets = _load_factsets(config.facts)
        source, prompts_path = catalogs[0]
        catalog = corpus.load_prompts(prompts_path, source)
        contexts = corpus.load_contexts(config.contexts)

    with stage("build-queries"):
        prompt_instances: list[Instance] = []
        context_instances: list[Instance] = []
        masked_instances: list[Instance] = []
        recon_instances: list[Instance] = []
        presence: dict[str, bool] = {}
        missing_context = 0
        relations = sorted(set(factsets) & set(catalog))
        if not relations:
            raise ConfigError("no relation appears in both the facts and the catalog")
        for relation_id in relations:
            template = catalog[relation_id]
            for fact in factsets[relation_id]:
                context = contexts.get((fact.subject_id, fact.relation_id))
                if context is None:
                    missing_context += 1
                    continue
                prompt_inst = make_instance(fact, paradigms.build_prompt_query(fact, template))
                context_query = paradigms.build_context_query(fact, context, template)
                context_inst = make_instance(fact, context_query)
                present = paradigms.contains_answer(context.text, fact.object_label)
                presence[prompt_inst.instance_id] = present
                if present:
                    masked_query = paradigms.build_masked_context_query(fact, context, template)
                    masked_text, _ = paradigms.mask_answer_in_context(context.text, fact.object_label)
                    recon_instances.append(
                        make_instance(fact, paradigms.build_reconstruction_query(masked_text, fact))
                    )
                else:
                    masked_query = context_query  # nothing to mask; identical probe
                prompt_instances.append(prompt_inst)
                context_instances.append(context_inst)
                masked_instances.append(make_instance(fact, masked_query))
        if not prompt_instances:
            raise ConfigError("no fact has a retrieved context")
        if missing_context:
            log.info("%d facts had no context and were skipped", missing_context)
            report.add("inputs", ALL, "facts_without_context", missing_context)

    owns_backend = backend is None
    if owns_backend:
        with stage("connect-scorer"):
            backend = open_backend(config)
    cache = open_cache(config, out)
    try:
        with stage("score"):
            requests = build_requests(
                [i.query for i in prompt_instances]
                + [i.query for i in context_instances]
                + [i.query for i in masked_instances]
                + [i.query for i in recon_instances],
                config.top_k,
            )
            scored = bridge.score_all(requests, backend, cache, config.max_in_flight)

        with stage("analyze"):
            prompt_records = resolve_records(prompt_instances, scored)
            context_records = resolve_records(context_instances, scored)
            masked_records = resolve_records(masked_instances, scored)
            recon_records = resolve_records(recon_instances, scored)
            golds = _golds(prompt_instances)

            rel_prompt = _by_relation(prompt_instances, prompt_records)
            rel_context = _by_relation(context_instances, context_records)
            rel_masked = _by_relation(masked_instances, masked_records)
            for relation_id in sorted(rel_prompt):
                n = len(rel_prompt[relation_id])
                report.add("precision", relation_id, "p1_prompt", analytics.precision_at_k(rel_prompt[relation_id], golds, 1), n)
                report.add("precision", relation_id, "p1_context", analytics.precision_at_k(rel_context[relation_id], golds, 1), n)
                report.add("precision", relation_id, "p1_context_masked", analytics.precision_at_k(rel_masked[relation_id], golds, 1), n)

            triple = analytics.masked_context_overall(rel_prompt, rel_context, rel_masked, golds)
            report.add("context_overall", MACRO, "p1_prompt", triple[0], len(rel_prompt))
            report.add("context_overall", MACRO, "p1_context", triple[1], len(rel_prompt))
            report.add("context_overall", MACRO, "p1_context_masked", triple[2], len(rel_prompt))

            present_row, absent_row = analytics.leakage_split(
                list(prompt_records.values()), list(context_records.values()), presence, golds
            )
            for row in (present_row, absent_row):
                report.add("leakage", row.group, "share_pct", row.share_pct, row.count)
                report.add("leakage", row.group, "p1_prompt", row.baseline_p1, row.count)
                report.add("leakage", row.group, "p1_context", row.enriched_p1, row.count)
                report.add("leakage", row.group, "delta", row.delta, row.count)

            present_ids = {i for i, flag in presence.items() if flag}
            if present_ids:
                recon_row, opaque_row = analytics.reconstruction_split(
                    [prompt_records[i] for i in sorted(present_ids)],
                    [masked_records[i] for i in sorted(present_ids)],
                    [recon_records[i] for i in sorted(present_ids)],
                    golds,
                )
                for row in (recon_row, opaque_row):
                    report.add("reconstruction", row.group, "share_pct", row.share_pct, row.count)
                    report.add("reconstruction", row.group, "p1_prompt", row.baseline_p1, row.count)
                    report.add("reconstruction", row.group, "p1_context_masked", row.enriched_p1, row.count)
                    report.add("reconstruction", row.group, "delta", row.delta, row.count)
            else:
                log.info("no context contains its answer; reconstruction split skipped")

        with stage("emit"):
            queries_dir = out / "queries"
            queries_dir.mkdir(exist_ok=True)
            _write_queries((i.query for i in prompt_instances), queries_dir / "prompt.tsv")
            _write_queries((i.query for i in context_instances), queries_dir / "context.tsv")
            _write_queries((i.query for i in masked_instances), queries_dir / "context_masked.tsv")
            _write_queries((i.query for i in recon_instances), queries_dir / "reconstruction.tsv")
            report.to_csv(out / "metrics.csv")
            write_report(out / "metrics.csv", out / "report.md", "Context inference metrics")
    finally:
        if owns_backend and backend is not None:
            backend.close()
    return report


# ---------------------------------------------------------------- data builds


def run_build_uniform(config: ExperimentConfig, backend=None) -> MetricsReport:
    """Filter, presample, and equalize a facts file into a uniform benchmark."""
    _require(config, facts=config.facts)
    out = prepare_out(config)
    report = MetricsReport()
    owns_backend = backend is None and bool(config.scorer_cmd)
    if owns_backend:
        with stage("connect-scorer"):
            backend = open_backend(config)
    try:
        with stage("load-inputs"):
            factsets = corpus.load_facts(config.facts)
        with stage("sample"):
            checker = bridge.single_token_checker(backend) if backend is not None else None
            if checker is None:
                log.warning("no scorer given; skipping the single-token filter")
            subsets = []
            reports = []
            for factset in factsets:
                relation_id = factset.relation_id
                report.add("uniform_subset", relation_id, "facts_in", len(factset))
                if checker is not None:
                    factset = corpus.filter_single_token(factset, checker)
                    report.add("uniform_subset", relation_id, "facts_single_token", len(factset))
                factset = sampler.presample(
                    factset, config.presample_cap, derive_seed(config.seed, "presample", relation_id)
                )
                report.add("uniform_subset", relation_id, "facts_presampled", len(factset))
                subset, sample_report = sampler.build_uniform_subset(
                    factset, derive_seed(config.seed, "uniform", relation_id)
                )
                subsets.append(subset)
                reports.append(sample_report)
                report.add("uniform_subset", relation_id, "median_frequency", sample_report.median_frequency)
                report.add("uniform_subset", relation_id, "groups_kept", sample_report.groups_kept)
                report.add("uniform_subset", relation_id, "groups_deleted", sample_report.groups_deleted)
                report.add("uniform_subset", relation_id, "facts_out", sample_report.facts_out)
        with stage("emit"):
            corpus.write_facts(subsets, out / "uniform_facts.tsv")
            sampler.write_sample_reports(reports, out / "sample_report.tsv")
            report.to_csv(out / "metrics.csv")
            write_report(out / "metrics.csv", out / "report.md", "Uniform subset build")
    finally:
        if owns_backend and backend is not None:
            backend.close()
    return report


def run_induce_types(config: ExperimentConfig) -> MetricsReport:
    """Induce every relation's answer type from its object entities."""
    _require(config, facts=config.facts, taxonomy=config.taxonomy)
    out = prepare_out(config)
    report = MetricsReport()
    with stage("load-inputs"):
        factsets = corpus.load_facts(config.facts)
        store = taxonomy.load_taxonomy(config.taxonomy, config.labels or None)
    with stage("induce-types"):
        assignments = []
        failures = 0
        for factset in factsets:
            seeds = sorted({f.object_id for f in factset})
            try:
                etg = taxonomy.condense_cycles(taxonomy.build_etg(seeds, store))
                order = taxonomy.fine_to_coarse_order(etg)
                assignment = taxonomy.induce_type(order, etg, config.type_threshold, factset.relation_id)
            except (taxonomy.TypeInductionError, taxonomy.CycleError) as exc:
                log.warning("type induction failed for %s: %s", factset.relation_id, exc)
                report.add("type_induction", factset.relation_id, "coverage_fraction", None)
                failures += 1
                continue
            assignments.append(assignment)
            report.add("type_induction", factset.relation_id, "coverage_fraction", assignment.coverage_fraction)
        if not assignments:
            raise analytics.AnalysisError("type induction failed for every relation")
    with stage("emit"):
        taxonomy.write_type_assignments(assignments, out / "types.tsv")
        report.to_csv(out / "metrics.csv")
        write_report(out / "metrics.csv", out / "report.md", "Type induction")
    return report
