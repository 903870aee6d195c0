"""Run a mock scorer as a real subprocess speaking the wire protocol.

Useful as a protocol reference and for end-to-end CLI tests that need a
--scorer-cmd without a heavyweight model:

    python -m probekit.mockserver --config mock.json [--log requests.log]

The config file selects the backend:

    {"mode": "biased", "bias": {"paris": 0.6, "london": 0.4},
     "vocab": ["paris", "london", "tokyo"], "subject_shift": 0.0,
     "seed": 7, "model_id": "mock"}

mode "context_echo" adds context echoing, mode "table" serves a fixed
{"table": {text: [[token, log_prob], ...]}} lookup.
"""

from __future__ import annotations

import argparse
import json
import sys

from .bridge import ContextEchoScorer, MockScorer, MockScorerConfig, TableScorer


def backend_from_config(config: dict):
    mode = config.get("mode", "biased")
    if mode == "table":
        return TableScorer(
            {text: [tuple(p) for p in preds] for text, preds in config["table"].items()},
            model_id=config.get("model_id", "table"),
            vocab=config.get("vocab", ()),
        )
    mock_config = MockScorerConfig(
        bias=config["bias"],
        subject_shift=float(config.get("subject_shift", 0.0)),
        vocab=tuple(config.get("vocab", ())),
        seed=int(config.get("seed", 0)),
        model_id=config.get("model_id", "mock"),
    )
    if mode == "context_echo":
        return ContextEchoScorer(mock_config, echo_weight=float(config.get("echo_weight", 0.6)))
    if mode == "biased":
        return MockScorer(mock_config)
    raise ValueError(f"unknown mock mode {mode!r}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="mock masked-LM scorer on stdio")
    parser.add_argument("--config", required=True, help="JSON file describing the mock")
    parser.add_argument("--log", default=None, help="append every request line here")
    args = parser.parse_args(argv)

    with open(args.config, encoding="utf-8") as handle:
        backend = backend_from_config(json.load(handle))
    log_handle = open(args.log, "a", encoding="utf-8") if args.log else None

    out = sys.stdout
    out.write(json.dumps(backend.handshake(), ensure_ascii=False) + "\n")
    out.flush()
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        if log_handle is not None:
            log_handle.write(line + "\n")
            log_handle.flush()
        try:
            payload = json.loads(line)
        except json.JSONDecodeError:
            out.write(json.dumps({"id": None, "error": "malformed request", "retryable": False}) + "\n")
            out.flush()
            continue
        backend.submit(payload)
        out.write(json.dumps(backend.receive(), ensure_ascii=False) + "\n")
        out.flush()
    if log_handle is not None:
        log_handle.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
