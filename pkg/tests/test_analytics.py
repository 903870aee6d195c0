"""Distribution comparison and rank metrics against brute-force oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probekit.analytics import (
    AnalysisError,
    RankChange,
    RankOutcome,
    UndefinedCorrelationError,
    distribution_correlation,
    gold_rank,
    kl_divergence,
    leakage_split,
    macro_mean,
    masked_context_overall,
    mrr,
    pearson,
    precision_at_k,
    prediction_histogram,
    rank_change_analysis,
    rank_outcome,
    reconstruction_split,
    record_distribution,
    surface_form_overlap,
    topk_coverage,
    type_transition_analysis,
)
from probekit.bridge import PredictionRecord
from probekit.distributions import Distribution
from probekit.seeding import make_rng


def record(qid, *tokens_with_probs):
    """Build a record from (token, probability) pairs, most likely first."""
    preds = tuple((t, math.log(p)) for t, p in tokens_with_probs)
    return PredictionRecord(qid, "test", preds, created_at=0.0)


def random_distribution(rng, n_tokens, min_component=0.01):
    raw = rng.random(n_tokens) + min_component * n_tokens
    raw /= raw.sum()
    labels = [f"t{i}" for i in range(n_tokens)]
    return Distribution(dict(zip(labels, raw.tolist())))


# ---- correlation


def brute_pearson(d1, d2):
    labels = sorted(set(d1.weights) | set(d2.weights))
    x = np.array([d1.get(t) for t in labels])
    y = np.array([d2.get(t) for t in labels])
    return float(np.corrcoef(x, y)[0, 1])  # independent implementation


def test_pearson_matches_numpy_on_random_pairs():
    rng = make_rng(77)
    for _ in range(300):
        n = int(rng.integers(2, 10))
        d1 = random_distribution(rng, n)
        d2 = random_distribution(rng, int(rng.integers(2, 10)))
        assert pearson(d1, d2) == pytest.approx(brute_pearson(d1, d2), abs=1e-9)


def test_pearson_perfect_and_inverse():
    d1 = Distribution({"a": 0.8, "b": 0.2})
    d2 = Distribution({"a": 0.2, "b": 0.8})
    assert pearson(d1, d1) == pytest.approx(1.0)
    assert pearson(d1, d2) == pytest.approx(-1.0)


def test_pearson_undefined_cases():
    with pytest.raises(UndefinedCorrelationError):
        pearson(Distribution({"a": 1.0}), Distribution({"a": 1.0}))  # single token
    with pytest.raises(UndefinedCorrelationError):
        # constant non-identical vector on the union support
        pearson(Distribution({"a": 1.0}), Distribution({"a": 0.5, "b": 0.5}))


def test_distribution_correlation_identity_shortcut():
    point = Distribution({"a": 1.0})
    assert distribution_correlation(point, Distribution({"a": 1.0})) == 1.0
    d = Distribution({"a": 0.6, "b": 0.4})
    assert distribution_correlation(d, Distribution(dict(d.weights))) == 1.0
    other = Distribution({"a": 0.4, "b": 0.6})
    assert distribution_correlation(d, other) == pytest.approx(pearson(d, other))


# ---- KL


def brute_kl(p, q, epsilon):
    """Same definition, independently restated: smooth q over p's support."""
    support = [t for t, w in p.weights.items() if w > 0]
    z = sum(q.weights.get(t, 0.0) + epsilon for t in sorted(p.weights))
    smoothed = {t: (q.weights.get(t, 0.0) + epsilon) / z for t in support}
    return sum(p.weights[t] * math.log(p.weights[t] / smoothed[t]) for t in support)


def test_kl_matches_brute_force():
    rng = make_rng(88)
    for _ in range(300):
        p = random_distribution(rng, int(rng.integers(2, 10)))
        q = random_distribution(rng, int(rng.integers(2, 10)))
        assert kl_divergence(p, q) == pytest.approx(brute_kl(p, q, 1e-6), abs=1e-9)


def test_kl_hand_value():
    p = Distribution({"a": 0.5, "b": 0.5})
    q = Distribution({"a": 0.75, "b": 0.25})
    expected = 0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)  # ~0.1438
    assert kl_divergence(p, q) == pytest.approx(expected, abs=1e-3)
    assert kl_divergence(p, q) == pytest.approx(0.1438, abs=1e-3)


def test_kl_self_is_negligible():
    rng = make_rng(99)
    for _ in range(50):
        p = random_distribution(rng, int(rng.integers(2, 10)))
        assert 0.0 <= kl_divergence(p, p) < 1e-9


def test_kl_disjoint_support_reduces_to_uniform_comparison():
    # q has no mass on p's support, so the smoothed q becomes uniform there
    p = Distribution({"a": 0.9, "b": 0.1})
    q = Distribution({"c": 1.0})
    expected = 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
    value = kl_divergence(p, q)
    assert math.isfinite(value)
    assert value == pytest.approx(expected, abs=1e-6)
    # and a uniform p against nothing shared is indistinguishable from itself
    assert kl_divergence(Distribution({"a": 0.5, "b": 0.5}), q) == pytest.approx(0.0, abs=1e-9)


def test_kl_rejects_nonpositive_epsilon():
    p = Distribution({"a": 1.0})
    with pytest.raises(ValueError):
        kl_divergence(p, p, epsilon=0.0)


@given(st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_kl_nonnegative_property(seed):
    rng = make_rng(seed)
    p = random_distribution(rng, int(rng.integers(2, 8)))
    q = random_distribution(rng, int(rng.integers(2, 8)))
    assert kl_divergence(p, q) >= -1e-12


# ---- histograms and coverage


def test_prediction_histogram_top1():
    records = [
        record("q1", ("paris", 0.9), ("rome", 0.1)),
        record("q2", ("paris", 0.6), ("rome", 0.4)),
        record("q3", ("rome", 0.8), ("oslo", 0.2)),
    ]
    hist = prediction_histogram(records)
    assert hist.get("paris") == pytest.approx(2 / 3)
    assert hist.get("rome") == pytest.approx(1 / 3)
    assert hist.get("oslo") == 0.0


def test_prediction_histogram_weighted():
    records = [record("q1", ("a", 0.5), ("b", 0.5)), record("q2", ("a", 1.0))]
    hist = prediction_histogram(records, weight_by_probability=True)
    assert hist.get("a") == pytest.approx(0.75)
    assert hist.get("b") == pytest.approx(0.25)


def test_record_distribution_renormalizes():
    partial = record("q", ("a", 0.3), ("b", 0.1))  # only 40% of the mass returned
    dist = record_distribution(partial)
    assert dist.get("a") == pytest.approx(0.75)


def test_topk_coverage_percent():
    hist = Distribution.from_counts({"a": 6, "b": 3, "c": 1})
    assert topk_coverage(hist, 10, 1) == pytest.approx(60.0)
    assert topk_coverage(hist, 10, 2) == pytest.approx(90.0)


# ---- precision / ranks


GOLDS = {"q1": "paris", "q2": "rome", "q3": "oslo"}


def test_precision_at_k():
    records = [
        record("q1", ("paris", 0.9), ("rome", 0.1)),
        record("q2", ("paris", 0.6), ("rome", 0.4)),
        record("q3", ("rome", 0.8), ("oslo", 0.2)),
    ]
    assert precision_at_k(records, GOLDS, 1) == pytest.approx(100 / 3)
    assert precision_at_k(records, GOLDS, 2) == pytest.approx(100.0)
    with pytest.raises(AnalysisError):
        precision_at_k([], GOLDS, 1)
    with pytest.raises(AnalysisError):
        precision_at_k([record("unknown", ("x", 1.0))], GOLDS, 1)


def test_macro_mean_is_unweighted():
    assert macro_mean([100.0, 0.0]) == pytest.approx(50.0)
    with pytest.raises(AnalysisError):
        macro_mean([])


def test_gold_rank_with_filter():
    r = record("q", ("a", 0.5), ("b", 0.3), ("c", 0.2))
    assert gold_rank(r, "b") == 2
    assert gold_rank(r, "missing") is None
    assert gold_rank(r, "c", candidate_filter={"b", "c"}) == 2  # a filtered out
    assert gold_rank(r, "b", candidate_filter={"zzz"}) is None


def test_mrr_brute_force():
    records = [
        record("q1", ("paris", 0.5), ("rome", 0.3), ("oslo", 0.2)),
        record("q2", ("paris", 0.5), ("rome", 0.3), ("oslo", 0.2)),
        record("q3", ("paris", 0.5), ("rome", 0.3), ("oslo", 0.2)),
    ]
    # gold ranks: 1, 2, 3 -> (1 + 1/2 + 1/3) / 3
    assert mrr(records, GOLDS) == pytest.approx((1 + 0.5 + 1 / 3) / 3)
    assert 0.0 <= mrr(records, GOLDS) <= 1.0
    # filtering to {rome, oslo} promotes q2's gold to rank 1, q3's to rank 2, drops q1's
    assert mrr(records, GOLDS, candidate_filter={"rome", "oslo"}) == pytest.approx((0 + 1 + 0.5) / 3)


def test_rank_outcome_invariant():
    with pytest.raises(ValueError):
        RankOutcome("q", overall_rank=2, in_type_rank=3)  # filtering cannot worsen rank
    outcome = rank_outcome(record("q", ("a", 0.5), ("b", 0.3), ("c", 0.2)), "c", {"b", "c"})
    assert outcome.overall_rank == 3
    assert outcome.in_type_rank == 2


def test_rank_change_analysis():
    before = {
        "q1": RankOutcome("q1", 3, None),
        "q2": RankOutcome("q2", 1, None),
        "q3": RankOutcome("q3", 2, None),
        "q4": RankOutcome("q4", None, None),  # not comparable
    }
    after = {
        "q1": RankOutcome("q1", 1, None),
        "q2": RankOutcome("q2", 1, None),
        "q3": RankOutcome("q3", 5, None),
        "q4": RankOutcome("q4", 2, None),
    }
    change = rank_change_analysis(before, after)
    assert change.compared == 3
    assert change.raised == pytest.approx(100 / 3)
    assert change.unchanged == pytest.approx(100 / 3)
    assert change.dropped == pytest.approx(100 / 3)
    assert change.raised + change.unchanged + change.dropped == pytest.approx(100.0, abs=0.01)
    with pytest.raises(AnalysisError):
        rank_change_analysis(before, {"q1": after["q1"]})


def test_rank_change_shares_validated():
    with pytest.raises(ValueError):
        RankChange(raised=50.0, unchanged=30.0, dropped=10.0, compared=10)


@given(st.lists(st.tuples(st.integers(1, 20), st.integers(1, 20)), min_size=1, max_size=40))
@settings(max_examples=100, deadline=None)
def test_rank_change_always_sums_to_100(pairs):
    before = {f"q{i}": RankOutcome(f"q{i}", b, None) for i, (b, _) in enumerate(pairs)}
    after = {f"q{i}": RankOutcome(f"q{i}", a, None) for i, (_, a) in enumerate(pairs)}
    change = rank_change_analysis(before, after)
    assert change.raised + change.unchanged + change.dropped == pytest.approx(100.0, abs=0.01)
    assert change.compared == len(pairs)


# ---- type transitions


def test_type_transition_hand_case():
    golds = {"q1": "paris", "q2": "rome", "q3": "oslo", "q4": "bern"}
    cities = {"paris", "rome", "oslo", "bern", "lyon"}
    before = [
        record("q1", ("dog", 1.0)),    # wrong, untyped
        record("q2", ("rome", 1.0)),   # right
        record("q3", ("lyon", 1.0)),   # wrong but typed
        record("q4", ("cat", 1.0)),    # wrong, untyped
    ]
    after = [
        record("q1", ("paris", 1.0)),  # wrong->right, untyped->typed
        record("q2", ("dog", 1.0)),    # right->wrong, typed->untyped
        record("q3", ("oslo", 1.0)),   # wrong->right, typed->typed
        record("q4", ("lyon", 1.0)),   # still wrong, now typed
    ]
    row = type_transition_analysis(before, after, golds, cities, "R", min_flips=2)
    assert row.queries == 4
    assert row.precision_delta == pytest.approx(25.0)  # 1/4 -> 2/4
    assert row.type_precision_delta == pytest.approx(25.0)  # typed top-1: 2/4 -> 3/4
    assert row.wrong_to_right == 2
    assert row.right_to_wrong == 1
    assert row.wrong_to_right_with_type_change == pytest.approx(50.0)
    assert row.right_to_wrong_without_type_change is None  # 1 < min_flips


def test_type_transition_suppression_threshold():
    golds = {"q1": "a"}
    row = type_transition_analysis(
        [record("q1", ("b", 1.0))], [record("q1", ("a", 1.0))], golds, {"a", "b"}, min_flips=3
    )
    assert row.wrong_to_right == 1
    assert row.wrong_to_right_with_type_change is None


# ---- paired splits


def split_fixture():
    golds = {"q1": "paris", "q2": "rome", "q3": "oslo", "q4": "bern"}
    prompt = [
        record("q1", ("paris", 1.0)),  # present, right without context
        record("q2", ("dog", 1.0)),    # present, wrong without context
        record("q3", ("dog", 1.0)),    # absent, wrong
        record("q4", ("bern", 1.0)),   # absent, right
    ]
    context = [
        record("q1", ("paris", 1.0)),  # stays right
        record("q2", ("rome", 1.0)),   # context fixed it
        record("q3", ("dog", 1.0)),    # still wrong
        record("q4", ("bern", 1.0)),   # stays right
    ]
    flags = {"q1": True, "q2": True, "q3": False, "q4": False}
    return prompt, context, flags, golds


def test_leakage_split_hand_case():
    prompt, context, flags, golds = split_fixture()
    present, absent = leakage_split(prompt, context, flags, golds)
    assert present.group == "present"
    assert present.count == 2
    assert present.share_pct == pytest.approx(50.0)
    assert present.baseline_p1 == pytest.approx(50.0)
    assert present.enriched_p1 == pytest.approx(100.0)
    assert present.delta == pytest.approx(50.0)
    assert absent.count == 2
    assert absent.baseline_p1 == pytest.approx(50.0)
    assert absent.enriched_p1 == pytest.approx(50.0)
    assert absent.delta == pytest.approx(0.0)
    assert present.share_pct + absent.share_pct == pytest.approx(100.0, abs=0.01)


def test_leakage_split_empty_group_is_explicit():
    prompt, context, flags, golds = split_fixture()
    all_present = {q: True for q in flags}
    present, absent = leakage_split(prompt, context, all_present, golds)
    assert present.count == 4
    assert absent.count == 0
    assert absent.baseline_p1 is None and absent.delta is None


def test_leakage_split_flag_coverage_enforced():
    prompt, context, flags, golds = split_fixture()
    with pytest.raises(AnalysisError):
        leakage_split(prompt, context, {"q1": True}, golds)
    with pytest.raises(AnalysisError):
        leakage_split(prompt, context[:-1], flags, golds)


def test_reconstruction_split_hand_case():
    golds = {"q1": "paris", "q2": "rome"}
    prompt = [record("q1", ("dog", 1.0)), record("q2", ("dog", 1.0))]
    masked = [record("q1", ("paris", 1.0)), record("q2", ("dog", 1.0))]
    recon = [record("q1", ("paris", 1.0)), record("q2", ("cat", 1.0))]
    rec_row, opaque_row = reconstruction_split(prompt, masked, recon, golds)
    assert rec_row.group == "reconstructable"
    assert rec_row.count == 1 and opaque_row.count == 1
    assert rec_row.baseline_p1 == pytest.approx(0.0)
    assert rec_row.enriched_p1 == pytest.approx(100.0)
    assert opaque_row.enriched_p1 == pytest.approx(0.0)
    with pytest.raises(AnalysisError):
        reconstruction_split(prompt, masked, recon[:-1], golds)


def test_masked_context_overall_macro():
    golds = {"q1": "a", "q2": "b", "q3": "c"}
    by_rel = lambda rec1, rec2, rec3: {"R1": [rec1, rec2], "R2": [rec3]}
    prompt = by_rel(record("q1", ("a", 1.0)), record("q2", ("x", 1.0)), record("q3", ("x", 1.0)))
    context = by_rel(record("q1", ("a", 1.0)), record("q2", ("b", 1.0)), record("q3", ("c", 1.0)))
    masked = by_rel(record("q1", ("x", 1.0)), record("q2", ("b", 1.0)), record("q3", ("x", 1.0)))
    triple = masked_context_overall(prompt, context, masked, golds)
    assert triple[0] == pytest.approx((50.0 + 0.0) / 2)
    assert triple[1] == pytest.approx(100.0)
    assert triple[2] == pytest.approx((50.0 + 0.0) / 2)
    with pytest.raises(AnalysisError):
        masked_context_overall(prompt, context, {"R1": masked["R1"]}, golds)


def test_surface_form_overlap():
    assert surface_form_overlap("Nikola Tesla", "Tesla")
    assert surface_form_overlap("Nikola Tesla", "tesla")  # case-insensitive
    assert not surface_form_overlap("Nikola Tesla", "Edison")
    assert not surface_form_overlap("Nikola Tesla", "")
