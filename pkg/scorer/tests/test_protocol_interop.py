"""The probing CLI and this backend meeting over the wire protocol only."""

import subprocess
import sys

import pytest


def have_probekit():
    probe = subprocess.run(
        [sys.executable, "-c", "import probekit"], capture_output=True, timeout=60
    )
    return probe.returncode == 0


@pytest.mark.skipif(not have_probekit(), reason="probekit CLI not installed")
def test_prompt_bias_run_against_real_backend(checkpoint, tmp_path):
    facts = tmp_path / "facts.tsv"
    facts.write_text(
        "".join(
            "\t".join(row) + "\n"
            for row in [
                ("Q1", "paris", "R1", "O1", "france"),
                ("Q2", "rome", "R1", "O2", "italy"),
                ("Q3", "berlin", "R1", "O3", "germany"),
                ("Q4", "madrid", "R1", "O4", "spain"),
            ]
        )
    )
    prompts = tmp_path / "prompts.tsv"
    prompts.write_text("R1\t[X] is the capital of [Y] .\n")

    result = subprocess.run(
        [
            sys.executable, "-m", "probekit", "run",
            "--experiment", "prompt-bias",
            "--facts", str(facts),
            "--prompts", f"manual={prompts}",
            "--scorer-cmd", f"{sys.executable} -m mlm_scorer --model {checkpoint} --max-length 32",
            "--top-k", "5",
            "--out", str(tmp_path / "out"),
            "--seed", "7",
        ],
        capture_output=True, text=True, timeout=300,
    )
    assert result.returncode == 0, result.stderr
    metrics = (tmp_path / "out" / "metrics.csv").read_text()
    assert "correlation[manual]" in metrics
    queries = (tmp_path / "out" / "queries" / "manual_prompt_a.tsv").read_text()
    assert "[MASK]" in queries
