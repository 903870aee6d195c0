"""Masked-LM scorer backend on stdio.

Speaks the probekit scorer wire protocol: a ready line first, then one
JSON reply per request line, in request order.

    {"op": "score", "id": "q1", "text": "paris is the capital of [MASK] .",
     "mask_index": 0, "top_k": 5, "candidates": null}
    -> {"id": "q1", "model_id": "...", "predictions": [["france", -0.9], ...],
        "truncated": false}
    {"op": "tokenize", "id": "t1", "label": "kuala lumpur"}
    -> {"id": "t1", "n_tokens": 2}

Per-request failures become {"id", "error", "retryable": false}; the
process keeps serving. The wire sentinels [MASK] and [SEP] are mapped to
the checkpoint's native mask and separator tokens before tokenization.

Inference runs in eval mode with gradients off, so identical request
batches give identical replies. Inputs longer than --max-length are
truncated from the left (the target mask lives near the end in every
probe paradigm); a request whose target mask would be cut is refused.
"""

import argparse
import json
import logging
import math
import queue
import sys
import threading
import time
from dataclasses import dataclass

import torch
from transformers import AutoModelForMaskedLM, AutoTokenizer

log = logging.getLogger("mlm_scorer")

WIRE_MASK = "[MASK]"
WIRE_SEPARATOR = "[SEP]"
DEFAULT_TOP_K = 10


class RequestError(ValueError):
    """Permanent per-request failure; reported on the wire, never fatal."""


@dataclass(frozen=True)
class BackendConfig:
    model_name: str
    device: str = "cpu"
    max_length: int = 128
    batch_size: int = 8

    def __post_init__(self):
        if self.max_length < 8:
            raise ValueError(f"max_length must be >= 8, got {self.max_length}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


class MaskedLMScorer:
    """Fill-mask scoring for one checkpoint, one request batch at a time."""

    def __init__(self, config: BackendConfig):
        self.config = config
        started = time.perf_counter()
        self.tokenizer = AutoTokenizer.from_pretrained(config.model_name)
        self.model = AutoModelForMaskedLM.from_pretrained(config.model_name)
        self.model.eval().to(config.device)
        log.info("loaded %s in %.1fs", config.model_name, time.perf_counter() - started)
        if self.tokenizer.mask_token is None or self.tokenizer.mask_token_id is None:
            raise ValueError(f"{config.model_name} has no mask token; not a masked LM")
        self.model_id = config.model_name

    def _translate(self, text: str) -> str:
        """Map the wire sentinels onto the checkpoint's own special tokens."""
        native = text.replace(WIRE_MASK, self.tokenizer.mask_token)
        separator = self.tokenizer.sep_token
        if separator and separator != WIRE_SEPARATOR:
            native = native.replace(WIRE_SEPARATOR, separator)
        return native

    def prepare(self, text: str, mask_index: int) -> tuple[list[int], int, bool]:
        """Token ids, target mask position, and whether truncation happened."""
        ids = self.tokenizer(self._translate(text), add_special_tokens=True)["input_ids"]
        mask_id = self.tokenizer.mask_token_id
        positions = [i for i, token in enumerate(ids) if token == mask_id]
        if not 0 <= mask_index < len(positions):
            raise RequestError(
                f"mask_index {mask_index} out of range for {len(positions)} masks"
            )
        target = positions[mask_index]
        truncated = False
        if len(ids) > self.config.max_length:
            # keep the leading [CLS] and cut from the left of the rest
            head = 1 if ids[0] == self.tokenizer.cls_token_id else 0
            dropped = len(ids) - self.config.max_length
            if target < head + dropped:
                raise RequestError(
                    f"target mask at token {target} would be dropped by left "
                    f"truncation to {self.config.max_length} tokens"
                )
            ids = ids[:head] + ids[head + dropped:]
            target -= dropped
            truncated = True
        return ids, target, truncated

    def score_rows(self, rows: list[tuple[list[int], int]]) -> list[torch.Tensor]:
        """Log-probability vector at the target position of each row."""
        pad = self.tokenizer.pad_token_id
        if pad is None:
            pad = 0
        out: list[torch.Tensor] = []
        for start in range(0, len(rows), self.config.batch_size):
            chunk = rows[start:start + self.config.batch_size]
            width = max(len(ids) for ids, _ in chunk)
            batch = torch.full((len(chunk), width), pad, dtype=torch.long)
            attention = torch.zeros((len(chunk), width), dtype=torch.long)
            for row, (ids, _) in enumerate(chunk):
                batch[row, :len(ids)] = torch.tensor(ids, dtype=torch.long)
                attention[row, :len(ids)] = 1
            with torch.no_grad():
                logits = self.model(
                    input_ids=batch.to(self.config.device),
                    attention_mask=attention.to(self.config.device),
                ).logits
            log_probs = torch.log_softmax(logits.float(), dim=-1)
            for row, (_, target) in enumerate(chunk):
                out.append(log_probs[row, target].cpu())
        return out

    def predictions(
        self, row: torch.Tensor, top_k: int, candidates: list[str] | None
    ) -> tuple[list[tuple[str, float]], list[str]]:
        """(token, log_prob) pairs, heaviest first, plus skipped candidates.

        Candidates are scored against the full-vocabulary softmax and then
        filtered, so their log-probabilities are comparable across requests;
        multi-token candidates cannot be scored at one mask and are skipped.
        """
        if candidates is None:
            k = min(top_k, row.shape[-1])
            values, indices = torch.topk(row, k)
            tokens = self.tokenizer.convert_ids_to_tokens(indices.tolist())
            pairs = [
                (token, value)
                for token, value in zip(tokens, values.tolist())
                if math.isfinite(value)
            ]
            pairs.sort(key=lambda p: (-p[1], p[0]))
            return pairs, []

        pairs = []
        skipped = []
        seen = set()
        for label in candidates:
            if label in seen:
                continue
            seen.add(label)
            token_ids = self.tokenizer(str(label), add_special_tokens=False)["input_ids"]
            if len(token_ids) != 1:
                skipped.append(label)
                continue
            value = float(row[token_ids[0]])
            if math.isfinite(value):
                pairs.append((label, value))
        pairs.sort(key=lambda p: (-p[1], p[0]))
        return pairs[:top_k], skipped

    def n_tokens(self, label: str) -> int:
        """Subword count under the checkpoint's tokenizer, no special tokens."""
        if not label.strip():
            raise RequestError("label must be non-empty")
        ids = self.tokenizer(label, add_special_tokens=False)["input_ids"]
        if not ids:
            raise RequestError(f"label {label!r} yields no tokens")
        return len(ids)


def _parse_score(payload: dict) -> tuple[str, int, int, list[str] | None]:
    text = payload.get("text")
    if not isinstance(text, str) or not text:
        raise RequestError("score request needs a non-empty text")
    mask_index = payload.get("mask_index")
    if not isinstance(mask_index, int):
        raise RequestError("score request needs an integer mask_index")
    top_k = payload.get("top_k", DEFAULT_TOP_K)
    if not isinstance(top_k, int) or top_k < 1:
        raise RequestError(f"top_k must be a positive integer, got {top_k!r}")
    candidates = payload.get("candidates")
    if candidates is not None:
        if not isinstance(candidates, list) or not all(isinstance(c, str) for c in candidates):
            raise RequestError("candidates must be a list of strings")
    return text, mask_index, top_k, candidates


def handle_batch(scorer: MaskedLMScorer, lines: list[str]) -> list[dict]:
    """Replies for a batch of raw request lines, in request order."""
    slots: list[tuple] = []
    rows: list[tuple[list[int], int]] = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        try:
            payload = json.loads(line)
            if not isinstance(payload, dict):
                raise RequestError("request is not a JSON object")
        except json.JSONDecodeError:
            slots.append(("done", {"id": None, "error": "malformed request line", "retryable": False}))
            continue
        except RequestError as exc:
            slots.append(("done", {"id": None, "error": str(exc), "retryable": False}))
            continue
        rid = payload.get("id")
        op = payload.get("op")
        try:
            if op == "score":
                text, mask_index, top_k, candidates = _parse_score(payload)
                ids, target, truncated = scorer.prepare(text, mask_index)
                slots.append(("score", rid, len(rows), top_k, candidates, truncated))
                rows.append((ids, target))
            elif op == "tokenize":
                label = payload.get("label")
                if not isinstance(label, str):
                    raise RequestError("tokenize request needs a string label")
                slots.append(("done", {"id": rid, "n_tokens": scorer.n_tokens(label)}))
            else:
                raise RequestError(f"unknown op {op!r}")
        except RequestError as exc:
            slots.append(("done", {"id": rid, "error": str(exc), "retryable": False}))

    vectors = scorer.score_rows(rows) if rows else []
    replies = []
    for slot in slots:
        if slot[0] == "done":
            replies.append(slot[1])
            continue
        _, rid, row, top_k, candidates, truncated = slot
        pairs, skipped = scorer.predictions(vectors[row], top_k, candidates)
        reply = {
            "id": rid,
            "model_id": scorer.model_id,
            "predictions": [[token, log_prob] for token, log_prob in pairs],
            "truncated": truncated,
        }
        if candidates is not None:
            reply["skipped"] = skipped
        replies.append(reply)
    return replies


def _emit(stream, payload: dict) -> None:
    stream.write(json.dumps(payload, ensure_ascii=False) + "\n")
    stream.flush()


def serve(config: BackendConfig, stdin=None, stdout=None) -> None:
    """Load the checkpoint, print the ready line, answer until EOF.

    Requests already waiting on stdin are drained and their model forwards
    run as padded batches of up to config.batch_size; replies always come
    back in request order.
    """
    scorer = MaskedLMScorer(config)
    out = stdout if stdout is not None else sys.stdout
    source = stdin if stdin is not None else sys.stdin

    lines: queue.SimpleQueue = queue.SimpleQueue()

    def pump():
        for line in source:
            lines.put(line)
        lines.put(None)

    threading.Thread(target=pump, daemon=True).start()
    _emit(out, {
        "op": "ready",
        "model_id": scorer.model_id,
        "mask_sentinel": WIRE_MASK,
        "separator": WIRE_SEPARATOR,
    })

    while True:
        line = lines.get()
        if line is None:
            return
        batch = [line]
        done = False
        while True:
            try:
                extra = lines.get_nowait()
            except queue.Empty:
                break
            if extra is None:
                done = True
                break
            batch.append(extra)
        for reply in handle_batch(scorer, batch):
            _emit(out, reply)
        if done:
            return


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="masked-LM scorer on stdio")
    parser.add_argument("--model", required=True, help="checkpoint name or path")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--max-length", type=int, default=128)
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        config = BackendConfig(args.model, args.device, args.max_length, args.batch_size)
    except ValueError as exc:
        parser.error(str(exc))
    serve(config)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
