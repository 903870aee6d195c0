"""Distributional statistics and ranking metrics over prediction records.

Metric conventions: precision values are percentages (0..100), MRR stays a
fraction in [0, 1], and every macro value is the unweighted mean over
relations. Functions raise instead of guessing whenever record sets that
must be paired do not line up.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .bridge import PredictionRecord
from .distributions import Distribution

log = logging.getLogger(__name__)

DEFAULT_KL_EPSILON = 1e-6
MIN_FLIPS = 3  # transition cells with fewer flipped queries are suppressed


class AnalysisError(ValueError):
    """Inputs to a metric are inconsistent or empty."""


class UndefinedCorrelationError(AnalysisError):
    """Pearson r does not exist for these vectors; never silently zero."""


def record_distribution(record: PredictionRecord) -> Distribution:
    """The record's probabilities, renormalized over its returned tokens."""
    if not record.predictions:
        raise AnalysisError(f"record {record.query_id} has no predictions")
    weights = {token: math.exp(lp) for token, lp in record.predictions}
    return Distribution.from_counts(weights)


def prediction_histogram(
    records: Sequence[PredictionRecord], weight_by_probability: bool = False
) -> Distribution:
    """What the model answers across a dataset.

    By default each record contributes its top-1 token; with
    weight_by_probability each record contributes its whole renormalized
    top-k mass instead.
    """
    if not records:
        raise AnalysisError("cannot build a histogram from zero records")
    accumulated: dict[str, float] = {}
    for record in records:
        if not record.predictions:
            raise AnalysisError(f"record {record.query_id} has no predictions")
        if weight_by_probability:
            for token, weight in record_distribution(record).weights.items():
                accumulated[token] = accumulated.get(token, 0.0) + weight
        else:
            top = record.predictions[0][0]
            accumulated[top] = accumulated.get(top, 0.0) + 1.0
    return Distribution.from_counts(accumulated)


def pearson(d1: Distribution, d2: Distribution) -> float:
    """Pearson r of the weight vectors aligned on the union of supports."""
    labels, x, y = d1.aligned(d2)
    if len(labels) < 2:
        raise UndefinedCorrelationError("union support must contain at least two tokens")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant weight vector")
    return float(np.clip(float(dx @ dy) / (sx * sy), -1.0, 1.0))


def distribution_correlation(d1: Distribution, d2: Distribution) -> float:
    """pearson(), except exactly identical distributions count as 1.0.

    Identical maps are perfectly correlated but can degenerate to a single
    support token (e.g. two point masses on the same answer), where raw
    Pearson is undefined; pipelines use this wrapper for reporting.
    """
    if d1.weights == d2.weights:
        return 1.0
    return pearson(d1, d2)


def kl_divergence(p: Distribution, q: Distribution, epsilon: float = DEFAULT_KL_EPSILON) -> float:
    """KL(p || q) in nats, with q smoothed by epsilon over p's support.

    p is the reference (e.g. a dataset's answer distribution), q the model
    side. q is restricted to p's support, given epsilon extra mass per
    token, and renormalized, so missing tokens cost a finite amount.
    """
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    support = sorted(p.support())
    z = sum(q.get(token) + epsilon for token in support)
    total = 0.0
    for token in support:
        p_weight = p.get(token)
        if p_weight == 0.0:
            continue
        q_weight = (q.get(token) + epsilon) / z
        total += p_weight * (math.log(p_weight) - math.log(q_weight))
    return total


def topk_coverage(distribution: Distribution, counts_total: int, k: int) -> float:
    """Percentage of instances whose value is one of the k most frequent."""
    if counts_total < 1:
        raise AnalysisError("counts_total must be >= 1")
    return 100.0 * distribution.coverage(k)


def precision_at_k(
    records: Sequence[PredictionRecord], golds: Mapping[str, str], k: int = 1
) -> float:
    """Share of records whose gold answer appears in the top k, in percent."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not records:
        raise AnalysisError("precision over zero records is undefined")
    hits = 0
    for record in records:
        gold = golds.get(record.query_id)
        if gold is None:
            raise AnalysisError(f"no gold answer for record {record.query_id}")
        if gold in [token for token, _ in record.predictions[:k]]:
            hits += 1
    return 100.0 * hits / len(records)


def macro_mean(values: Iterable[float]) -> float:
    """Unweighted mean over relations; the only macro average used anywhere."""
    values = list(values)
    if not values:
        raise AnalysisError("macro mean of zero relations is undefined")
    return sum(values) / len(values)


def gold_rank(
    record: PredictionRecord, gold: str, candidate_filter: frozenset[str] | set[str] | None = None
) -> int | None:
    """1-based rank of the gold among (optionally filtered) predictions."""
    tokens = [token for token, _ in record.predictions]
    if candidate_filter is not None:
        tokens = [token for token in tokens if token in candidate_filter]
    try:
        return tokens.index(gold) + 1
    except ValueError:
        return None


def mrr(
    records: Sequence[PredictionRecord],
    golds: Mapping[str, str],
    candidate_filter: frozenset[str] | set[str] | None = None,
) -> float:
    """Mean reciprocal rank in [0, 1]; an absent gold contributes zero."""
    if not records:
        raise AnalysisError("MRR over zero records is undefined")
    total = 0.0
    for record in records:
        gold = golds.get(record.query_id)
        if gold is None:
            raise AnalysisError(f"no gold answer for record {record.query_id}")
        rank = gold_rank(record, gold, candidate_filter)
        if rank is not None:
            total += 1.0 / rank
    return total / len(records)


@dataclass(frozen=True)
class RankOutcome:
    """Where the gold answer landed for one query, overall and within type."""

    query_id: str
    overall_rank: int | None
    in_type_rank: int | None

    def __post_init__(self):
        if (
            self.overall_rank is not None
            and self.in_type_rank is not None
            and self.in_type_rank > self.overall_rank
        ):
            raise ValueError("in-type rank cannot be worse than the overall rank")


def rank_outcome(
    record: PredictionRecord, gold: str, type_labels: frozenset[str] | set[str] | None
) -> RankOutcome:
    return RankOutcome(
        query_id=record.query_id,
        overall_rank=gold_rank(record, gold),
        in_type_rank=gold_rank(record, gold, type_labels) if type_labels is not None else None,
    )


@dataclass(frozen=True)
class RankChange:
    """How ranks moved between two paired runs, in percent."""

    raised: float
    unchanged: float
    dropped: float
    compared: int

    def __post_init__(self):
        total = self.raised + self.unchanged + self.dropped
        if abs(total - 100.0) > 0.01:
            raise ValueError(f"rank change shares sum to {total}, expected 100")


def rank_change_analysis(
    before: Mapping[str, RankOutcome],
    after: Mapping[str, RankOutcome],
    field: str = "overall_rank",
) -> RankChange:
    """Share of queries whose rank improved, held, or worsened.

    Only queries where the chosen rank field exists in both runs are
    compared; a smaller rank counts as raised.
    """
    if field not in ("overall_rank", "in_type_rank"):
        raise ValueError(f"unknown rank field {field!r}")
    if set(before) != set(after):
        raise AnalysisError("before and after cover different queries")
    pairs = []
    for query_id in before:
        rank_before = getattr(before[query_id], field)
        rank_after = getattr(after[query_id], field)
        if rank_before is not None and rank_after is not None:
            pairs.append((rank_before, rank_after))
    if not pairs:
        raise AnalysisError(f"no queries have {field} in both runs")
    n = len(pairs)
    raised = sum(1 for b, a in pairs if a < b)
    dropped = sum(1 for b, a in pairs if a > b)
    unchanged = n - raised - dropped
    return RankChange(100.0 * raised / n, 100.0 * unchanged / n, 100.0 * dropped / n, n)


@dataclass(frozen=True)
class TransitionRow:
    """Type-level before/after comparison for one relation."""

    relation_id: str
    queries: int
    precision_delta: float
    type_precision_delta: float
    wrong_to_right: int
    right_to_wrong: int
    wrong_to_right_with_type_change: float | None
    right_to_wrong_without_type_change: float | None


def type_transition_analysis(
    before_records: Sequence[PredictionRecord],
    after_records: Sequence[PredictionRecord],
    golds: Mapping[str, str],
    type_labels: frozenset[str] | set[str],
    relation_id: str = "",
    min_flips: int = MIN_FLIPS,
) -> TransitionRow:
    """Did precision move because predictions changed type?

    Tracks answer correctness and induced-type membership of the top-1
    prediction before and after an intervention. Flip percentages are
    suppressed (None) when fewer than min_flips queries flipped.
    """
    before = {r.query_id: r for r in before_records}
    after = {r.query_id: r for r in after_records}
    if set(before) != set(after):
        raise AnalysisError("before and after cover different queries")
    if not before:
        raise AnalysisError("transition analysis over zero queries is undefined")

    correct_before: dict[str, bool] = {}
    correct_after: dict[str, bool] = {}
    typed_before: dict[str, bool] = {}
    typed_after: dict[str, bool] = {}
    for query_id in before:
        gold = golds.get(query_id)
        if gold is None:
            raise AnalysisError(f"no gold answer for record {query_id}")
        top_before = before[query_id].top1()
        top_after = after[query_id].top1()
        correct_before[query_id] = top_before == gold
        correct_after[query_id] = top_after == gold
        typed_before[query_id] = top_before in type_labels
        typed_after[query_id] = top_after in type_labels

    n = len(before)
    precision_delta = 100.0 * (sum(correct_after.values()) - sum(correct_before.values())) / n
    type_precision_delta = 100.0 * (sum(typed_after.values()) - sum(typed_before.values())) / n
    wrong_to_right = [q for q in before if not correct_before[q] and correct_after[q]]
    right_to_wrong = [q for q in before if correct_before[q] and not correct_after[q]]

    with_change = None
    if len(wrong_to_right) >= min_flips:
        changed = sum(1 for q in wrong_to_right if typed_before[q] != typed_after[q])
        with_change = 100.0 * changed / len(wrong_to_right)
    without_change = None
    if len(right_to_wrong) >= min_flips:
        same = sum(1 for q in right_to_wrong if typed_before[q] == typed_after[q])
        without_change = 100.0 * same / len(right_to_wrong)

    return TransitionRow(
        relation_id=relation_id,
        queries=n,
        precision_delta=precision_delta,
        type_precision_delta=type_precision_delta,
        wrong_to_right=len(wrong_to_right),
        right_to_wrong=len(right_to_wrong),
        wrong_to_right_with_type_change=with_change,
        right_to_wrong_without_type_change=without_change,
    )


@dataclass(frozen=True)
class SplitRow:
    """Micro P@1 of two paired runs within one group of queries."""

    group: str
    count: int
    share_pct: float
    baseline_p1: float | None
    enriched_p1: float | None
    delta: float | None


def _paired_records(
    a_records: Sequence[PredictionRecord], b_records: Sequence[PredictionRecord]
) -> tuple[dict[str, PredictionRecord], dict[str, PredictionRecord]]:
    a = {r.query_id: r for r in a_records}
    b = {r.query_id: r for r in b_records}
    if set(a) != set(b):
        raise AnalysisError("paired runs cover different queries")
    if not a:
        raise AnalysisError("split over zero queries is undefined")
    return a, b


def _split_rows(
    flags: Mapping[str, bool],
    a_records: Sequence[PredictionRecord],
    b_records: Sequence[PredictionRecord],
    golds: Mapping[str, str],
    names: tuple[str, str],
) -> tuple[SplitRow, SplitRow]:
    a, b = _paired_records(a_records, b_records)
    if set(flags) != set(a):
        raise AnalysisError("group flags must cover exactly the paired queries")
    total = len(a)
    rows = []
    for name, wanted in ((names[0], True), (names[1], False)):
        ids = sorted(q for q, flag in flags.items() if flag == wanted)
        if ids:
            baseline = precision_at_k([a[q] for q in ids], golds, 1)
            enriched = precision_at_k([b[q] for q in ids], golds, 1)
            rows.append(
                SplitRow(name, len(ids), 100.0 * len(ids) / total, baseline, enriched, enriched - baseline)
            )
        else:
            rows.append(SplitRow(name, 0, 0.0, None, None, None))
    return rows[0], rows[1]


def leakage_split(
    prompt_records: Sequence[PredictionRecord],
    context_records: Sequence[PredictionRecord],
    presence_flags: Mapping[str, bool],
    golds: Mapping[str, str],
) -> tuple[SplitRow, SplitRow]:
    """Context gains split by whether the context contained the answer."""
    return _split_rows(presence_flags, prompt_records, context_records, golds, ("present", "absent"))


def reconstruction_split(
    prompt_records: Sequence[PredictionRecord],
    masked_context_records: Sequence[PredictionRecord],
    reconstruction_records: Sequence[PredictionRecord],
    golds: Mapping[str, str],
) -> tuple[SplitRow, SplitRow]:
    """Masked-context gains split by whether the answer is reconstructable.

    A query is reconstructable when the top-1 prediction of its
    reconstruction record equals the gold. Reconstruction records must
    cover exactly the same (answer-present) queries as the paired runs.
    """
    recon = {r.query_id: r for r in reconstruction_records}
    prompt_ids = {r.query_id for r in prompt_records}
    if set(recon) != prompt_ids:
        raise AnalysisError("reconstruction records must cover exactly the paired queries")
    flags = {}
    for query_id, record in recon.items():
        gold = golds.get(query_id)
        if gold is None:
            raise AnalysisError(f"no gold answer for record {query_id}")
        flags[query_id] = record.top1() == gold
    return _split_rows(
        flags,
        prompt_records,
        masked_context_records,
        golds,
        ("reconstructable", "not_reconstructable"),
    )


def masked_context_overall(
    prompt_by_relation: Mapping[str, Sequence[PredictionRecord]],
    context_by_relation: Mapping[str, Sequence[PredictionRecord]],
    masked_by_relation: Mapping[str, Sequence[PredictionRecord]],
    golds: Mapping[str, str],
) -> tuple[float, float, float]:
    """Macro P@1 of the prompt, context, and masked-context runs."""
    relations = set(prompt_by_relation)
    if relations != set(context_by_relation) or relations != set(masked_by_relation):
        raise AnalysisError("runs cover different relations")
    if not relations:
        raise AnalysisError("no relations to average")
    prompt_values, context_values, masked_values = [], [], []
    for relation_id in sorted(relations):
        prompt = prompt_by_relation[relation_id]
        context = context_by_relation[relation_id]
        masked = masked_by_relation[relation_id]
        ids = {r.query_id for r in prompt}
        if ids != {r.query_id for r in context} or ids != {r.query_id for r in masked}:
            raise AnalysisError(f"runs cover different queries for relation {relation_id}")
        prompt_values.append(precision_at_k(prompt, golds, 1))
        context_values.append(precision_at_k(context, golds, 1))
        masked_values.append(precision_at_k(masked, golds, 1))
    return macro_mean(prompt_values), macro_mean(context_values), macro_mean(masked_values)


def surface_form_overlap(subject_label: str, predicted_label: str) -> bool:
    """Is the prediction a case-insensitive substring of the subject?"""
    if not predicted_label:
        return False
    return predicted_label.lower() in subject_label.lower()
