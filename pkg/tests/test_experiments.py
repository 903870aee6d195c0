"""End-to-end pipeline runs against in-process mock scorers."""

import json

import pytest

from probekit.bridge import ContextEchoScorer, MockScorer, MockScorerConfig, OfflineScorer
from probekit.experiments import (
    ConfigError,
    ExperimentConfig,
    StageFailure,
    run_build_uniform,
    run_case_analogy,
    run_context_inference,
    run_induce_types,
    run_prompt_bias,
)
from probekit.reporting import read_csv

from helpers import BIAS, write_tsv

FACT_ROWS = [
    ("Q1", "Alpha", "R1", "O1", "France"),
    ("Q2", "Beta", "R1", "O2", "Italy"),
    ("Q3", "Gamma", "R1", "O1", "France"),
    ("Q4", "Delta", "R1", "O3", "Spain"),
    ("Q5", "Epsilon", "R1", "O2", "Italy"),
    ("Q6", "Zeta", "R1", "O1", "France"),
    ("Q7", "Eta", "R1", "O2", "Italy"),
    ("Q7", "Eta", "R1", "O3", "Spain"),  # multi-answer subject
    ("Q10", "Ada", "R2", "O10", "physics"),
    ("Q11", "Bob", "R2", "O11", "chemistry"),
    ("Q12", "Cyd", "R2", "O10", "physics"),
    ("Q13", "Dee", "R2", "O11", "chemistry"),
]

PROMPT_ROWS = [("R1", "[X] is located in [Y] ."), ("R2", "[X] works on [Y] .")]

EDGE_ROWS = [
    ("O1", "C_country", "instance_of"),
    ("O2", "C_country", "instance_of"),
    ("O3", "C_country", "instance_of"),
    ("C_country", "C_state", "subclass_of"),
    ("O10", "C_field", "instance_of"),
    ("O11", "C_field", "instance_of"),
]

LABEL_ROWS = [
    ("O1", "France"),
    ("O2", "Italy"),
    ("O3", "Spain"),
    ("O10", "physics"),
    ("O11", "chemistry"),
    ("C_country", "Country"),
    ("C_state", "State"),
    ("C_field", "Field"),
]

CONTEXT_ROWS = [
    ("Q1", "R1", "Alpha lies in western France with old streets ."),
    ("Q2", "R1", "Beta is a charming town with a market ."),
    ("Q3", "R1", "Gamma borders France near the mountains ."),
    ("Q4", "R1", "Delta is known for its food ."),
    ("Q5", "R1", "Epsilon sits by the sea in Italy ."),
    ("Q6", "R1", "Zeta hosts a fair every spring ."),
    ("Q7", "R1", "Eta spans Italy and a wide plain ."),
    ("Q10", "R2", "Ada studied physics at the academy ."),
    ("Q11", "R2", "Bob wrote many papers ."),
    ("Q12", "R2", "Cyd taught at a small college ."),
]


@pytest.fixture
def corpus_dir(tmp_path):
    write_tsv(tmp_path / "facts.tsv", FACT_ROWS)
    write_tsv(tmp_path / "prompts.tsv", PROMPT_ROWS)
    write_tsv(tmp_path / "edges.tsv", EDGE_ROWS)
    write_tsv(tmp_path / "labels.tsv", LABEL_ROWS)
    write_tsv(tmp_path / "contexts.tsv", CONTEXT_ROWS)
    return tmp_path


def base_config(corpus_dir, out_name, **overrides):
    defaults = dict(
        facts=str(corpus_dir / "facts.tsv"),
        prompts=(f"manual={corpus_dir / 'prompts.tsv'}",),
        out=str(corpus_dir / out_name),
        seed=7,
    )
    defaults.update(overrides)
    return ExperimentConfig(**defaults)


def mock(shift=0.0, seed=0):
    return MockScorer(MockScorerConfig(bias=BIAS, subject_shift=shift, seed=seed))


def rows_by(rows, **match):
    return [r for r in rows if all(r[k] == v for k, v in match.items())]


def test_prompt_bias_pure_bias_gives_unit_correlations(corpus_dir):
    config = base_config(corpus_dir, "out", experiment="prompt-bias")
    run_prompt_bias(config, backend=mock(shift=0.0))
    out = corpus_dir / "out"
    rows = read_csv(out / "metrics.csv")
    corr = rows_by(rows, section="correlation[manual]")
    assert len(corr) == 9  # 2 relations x 3 metrics + 3 macro rows
    assert all(r["value"] == "1.000000" for r in corr)
    assert (out / "config.json").exists()
    assert (out / "distributions.tsv").exists()
    assert (out / "report.md").exists()
    for name in ("manual_prompt_a.tsv", "manual_prompt_b.tsv", "manual_prompt_only.tsv"):
        assert (out / "queries" / name).exists()


def test_prompt_bias_text_noise_breaks_correlations(corpus_dir):
    config = base_config(corpus_dir, "out", experiment="prompt-bias")
    run_prompt_bias(config, backend=mock(shift=1.0, seed=13))
    rows = read_csv(corpus_dir / "out" / "metrics.csv")
    macros = rows_by(rows, section="correlation[manual]", relation="macro")
    assert len(macros) == 3
    for row in macros:
        assert row["value"] != "-"
        assert float(row["value"]) < 1.0


def test_prompt_bias_multi_answer_subjects_stay_distinct(corpus_dir):
    config = base_config(corpus_dir, "out", experiment="prompt-bias")
    run_prompt_bias(config, backend=mock())
    rows = read_csv(corpus_dir / "out" / "metrics.csv")
    p1 = rows_by(rows, section="prompt_fitness[manual]", relation="R1", metric="p1_a")
    assert p1[0]["count"] == "8"  # Q7 contributes two instances


def test_prompt_bias_explicit_second_dataset(corpus_dir):
    write_tsv(
        corpus_dir / "facts_b.tsv",
        [
            ("Z1", "Hooke", "R2", "O11", "chemistry"),
            ("Z2", "Noether", "R2", "O10", "physics"),
        ],
    )
    config = base_config(
        corpus_dir, "out", experiment="prompt-bias", facts_b=str(corpus_dir / "facts_b.tsv")
    )
    run_prompt_bias(config, backend=mock())
    rows = read_csv(corpus_dir / "out" / "metrics.csv")
    assert rows_by(rows, section="correlation[manual]", relation="R2")
    assert not rows_by(rows, section="correlation[manual]", relation="R1")  # not in B


def test_prompt_bias_requires_common_relations(corpus_dir):
    write_tsv(corpus_dir / "other.tsv", [("Z1", "Solo", "R9", "O1", "France")])
    config = base_config(
        corpus_dir, "out", experiment="prompt-bias", facts_b=str(corpus_dir / "other.tsv")
    )
    with pytest.raises(StageFailure) as err:
        run_prompt_bias(config, backend=mock())
    assert isinstance(err.value.cause, ConfigError)
    assert err.value.stage_name == "build-queries"


def test_prepare_out_refuses_nonempty_without_force(corpus_dir):
    out = corpus_dir / "out"
    out.mkdir()
    (out / "left-over.txt").write_text("x")
    config = base_config(corpus_dir, "out", experiment="prompt-bias")
    with pytest.raises(ConfigError):
        run_prompt_bias(config, backend=mock())
    config = base_config(corpus_dir, "out", experiment="prompt-bias", force=True)
    run_prompt_bias(config, backend=mock())  # now allowed


def test_missing_inputs_fail_before_any_output(corpus_dir):
    config = base_config(corpus_dir, "out", experiment="prompt-bias", facts=str(corpus_dir / "nope.tsv"))
    with pytest.raises(ConfigError):
        run_prompt_bias(config, backend=mock())
    assert not (corpus_dir / "out").exists()


def test_case_analogy_full_battery(corpus_dir):
    config = base_config(
        corpus_dir, "out", experiment="case-analogy", cases=2,
        taxonomy=str(corpus_dir / "edges.tsv"), labels=str(corpus_dir / "labels.tsv"),
    )
    run_case_analogy(config, backend=mock(shift=0.6, seed=3))
    out = corpus_dir / "out"
    rows = read_csv(out / "metrics.csv")

    induction = rows_by(rows, section="type_induction")
    assert {r["relation"] for r in induction} == {"R1", "R2"}
    assert all(r["value"] == "1.000000" for r in induction)
    types = (out / "types.tsv").read_text().splitlines()
    assert types[0].startswith("R1\tC_country\tCountry\t")

    rank = rows_by(rows, section="rank_change", relation="all")
    overall = {r["metric"]: float(r["value"]) for r in rank if r["metric"].startswith("overall")}
    assert sum(overall.values()) == pytest.approx(100.0, abs=0.01)
    in_type = {r["metric"]: float(r["value"]) for r in rank if r["metric"].startswith("in_type")}
    assert sum(in_type.values()) == pytest.approx(100.0, abs=0.01)

    for metric_rows in (rows_by(rows, section="in_type_mrr", relation="all"),):
        for r in metric_rows:
            assert 0.0 <= float(r["value"]) <= 1.0

    assert (out / "queries" / "prompt.tsv").exists()
    assert (out / "queries" / "case.tsv").exists()


def test_case_analogy_skips_thin_relations(corpus_dir):
    config = base_config(
        corpus_dir, "out", experiment="case-analogy", cases=3,
        taxonomy=str(corpus_dir / "edges.tsv"), labels=str(corpus_dir / "labels.tsv"),
    )
    run_case_analogy(config, backend=mock(shift=0.6, seed=3))
    rows = read_csv(corpus_dir / "out" / "metrics.csv")
    skipped = rows_by(rows, section="case_sampling", relation="R2")
    assert skipped and skipped[0]["value"] == "4"  # every R2 pool holds only 2 cases
    assert not rows_by(rows, section="precision", relation="R2")


def test_case_analogy_survives_failed_induction(corpus_dir):
    # a taxonomy that knows nothing about R2's objects
    write_tsv(corpus_dir / "edges_r1.tsv", EDGE_ROWS[:4])
    config = base_config(
        corpus_dir, "out", experiment="case-analogy", cases=2,
        taxonomy=str(corpus_dir / "edges_r1.tsv"), labels=str(corpus_dir / "labels.tsv"),
    )
    run_case_analogy(config, backend=mock(shift=0.6, seed=3))
    rows = read_csv(corpus_dir / "out" / "metrics.csv")
    induction = {r["relation"]: r["value"] for r in rows_by(rows, section="type_induction")}
    assert induction["R1"] == "1.000000"
    assert induction["R2"] == "-"  # best candidate covers only half the seeds
    assert rows_by(rows, section="precision", relation="R2")  # precision still reported
    assert not rows_by(rows, section="type_transition", relation="R2")


def test_context_inference_splits_and_artifacts(corpus_dir):
    config = base_config(
        corpus_dir, "out", experiment="context-inference", contexts=str(corpus_dir / "contexts.tsv")
    )
    run_context_inference(config, backend=ContextEchoScorer(MockScorerConfig(bias=BIAS)))
    out = corpus_dir / "out"
    rows = read_csv(out / "metrics.csv")

    leak = rows_by(rows, section="leakage")
    shares = [float(r["value"]) for r in leak if r["metric"] == "share_pct"]
    assert sum(shares) == pytest.approx(100.0, abs=0.01)
    present_delta = rows_by(rows, section="leakage", relation="present", metric="delta")
    absent_delta = rows_by(rows, section="leakage", relation="absent", metric="delta")
    assert float(present_delta[0]["value"]) > float(absent_delta[0]["value"])

    recon = rows_by(rows, section="reconstruction")
    recon_shares = [float(r["value"]) for r in recon if r["metric"] == "share_pct"]
    assert sum(recon_shares) == pytest.approx(100.0, abs=0.01)

    overall = rows_by(rows, section="context_overall", relation="macro")
    assert {r["metric"] for r in overall} == {"p1_prompt", "p1_context", "p1_context_masked"}

    # the answer-absent side of a shared-context subject reuses the plain context query
    masked = (out / "queries" / "context_masked.tsv").read_text()
    plain = (out / "queries" / "context.tsv").read_text()
    assert "Eta spans Italy and a wide plain ." in plain
    assert "Eta spans [MASK] and a wide plain ." in masked
    for name in ("prompt.tsv", "context.tsv", "context_masked.tsv", "reconstruction.tsv"):
        assert (out / "queries" / name).exists()


def test_context_inference_counts_missing_contexts(corpus_dir):
    config = base_config(
        corpus_dir, "out", experiment="context-inference", contexts=str(corpus_dir / "contexts.tsv")
    )
    run_context_inference(config, backend=mock())
    rows = read_csv(corpus_dir / "out" / "metrics.csv")
    missing = rows_by(rows, section="inputs", metric="facts_without_context")
    assert missing and missing[0]["value"] == "1"  # Q13 is the only fact with no context row


def test_build_uniform_writes_equalized_facts(corpus_dir):
    config = base_config(corpus_dir, "out", experiment="build-uniform")
    run_build_uniform(config, backend=mock())
    out = corpus_dir / "out"
    sample_lines = (out / "sample_report.tsv").read_text().splitlines()
    assert [line.split("\t")[0] for line in sample_lines] == ["R1", "R2"]
    uniform = (out / "uniform_facts.tsv").read_text().splitlines()
    rows = read_csv(out / "metrics.csv")
    facts_out = {r["relation"]: int(r["value"]) for r in rows_by(rows, metric="facts_out")}
    assert len(uniform) == sum(facts_out.values())
    # single-token filter ran: the mock treats every known label as one token
    assert rows_by(rows, metric="facts_single_token")


def test_build_uniform_without_scorer_skips_filter(corpus_dir):
    config = base_config(corpus_dir, "out", experiment="build-uniform")
    run_build_uniform(config)
    rows = read_csv(corpus_dir / "out" / "metrics.csv")
    assert not rows_by(rows, metric="facts_single_token")
    assert rows_by(rows, metric="facts_out")


def test_induce_types_runner(corpus_dir):
    config = base_config(
        corpus_dir, "out", experiment="induce-types",
        taxonomy=str(corpus_dir / "edges.tsv"), labels=str(corpus_dir / "labels.tsv"),
    )
    run_induce_types(config)
    types = (corpus_dir / "out" / "types.tsv").read_text().splitlines()
    assert len(types) == 2
    assert types[1] == "R2\tC_field\tField\t1.000000"


def test_rerun_from_cache_is_byte_identical_with_zero_calls(corpus_dir):
    cache_dir = str(corpus_dir / "shared_cache")
    warm = base_config(
        corpus_dir, "out1", experiment="prompt-bias", cache_dir=cache_dir
    )
    run_prompt_bias(warm, backend=mock(shift=1.0, seed=13))

    offline = OfflineScorer("mock")
    replay = base_config(
        corpus_dir, "out2", experiment="prompt-bias", cache_dir=cache_dir
    )
    run_prompt_bias(replay, backend=offline)
    assert offline.requests_served == 0
    first = (corpus_dir / "out1" / "metrics.csv").read_bytes()
    second = (corpus_dir / "out2" / "metrics.csv").read_bytes()
    assert first == second


def test_config_json_reflects_resolved_settings(corpus_dir):
    config = base_config(corpus_dir, "out", experiment="prompt-bias", top_k=5)
    run_prompt_bias(config, backend=mock())
    resolved = json.loads((corpus_dir / "out" / "config.json").read_text())
    assert resolved["experiment"] == "prompt-bias"
    assert resolved["top_k"] == 5
    assert resolved["seed"] == 7
