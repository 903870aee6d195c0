"""Client side of the scorer wire protocol, plus deterministic mock backends.

A scorer is any process that prints a ready line and then answers one JSON
object per request line on stdout, in request order:

    {"op": "ready", "model_id": "...", "mask_sentinel": "[MASK]", "separator": "[SEP]"}
    {"id": "q1", "op": "score", "text": "...", "mask_index": 0, "top_k": 10, "candidates": null}
    -> {"id": "q1", "model_id": "...", "predictions": [["paris", -0.3], ...]}
    {"id": "t1", "op": "tokenize", "label": "kuala lumpur"}
    -> {"id": "t1", "n_tokens": 2}

Failures come back as {"id": ..., "error": "...", "retryable": bool}.
Scores are cached in an append-only file keyed by a content hash, so reruns
against a warm cache never touch the backend.
"""

from __future__ import annotations

import json
import logging
import queue
import shlex
import subprocess
import threading
import time
from collections import deque
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from hashlib import sha256
from pathlib import Path

import numpy as np

from .paradigms import word_pattern
from .seeding import derive_seed, make_rng
from .sentinels import MASK, SEPARATOR

log = logging.getLogger(__name__)


class ScorerError(RuntimeError):
    """A scoring request failed; retryable means the backend may recover."""

    def __init__(self, message: str, retryable: bool = False):
        super().__init__(message)
        self.retryable = retryable


class ProtocolError(ScorerError):
    """The backend broke the wire protocol; never retryable."""

    def __init__(self, message: str, raw: str | None = None):
        super().__init__(message, retryable=False)
        self.raw = raw


class CacheError(RuntimeError):
    """The cache file is corrupt; carries the byte offset of the bad line."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


@dataclass(frozen=True)
class ScoreRequest:
    """One mask to score in one probe text."""

    id: str
    text: str
    mask_index: int
    top_k: int = 10
    candidates: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("request id must be non-empty")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        masks = self.text.count(MASK)
        if not 0 <= self.mask_index < masks:
            raise ValueError(f"mask_index {self.mask_index} out of range for {masks} masks")
        if self.candidates is not None:
            object.__setattr__(self, "candidates", tuple(self.candidates))


@dataclass(frozen=True)
class PredictionRecord:
    """Ranked (token, log probability) pairs for one scored request."""

    query_id: str
    model_id: str
    predictions: tuple[tuple[str, float], ...]
    created_at: float

    def __post_init__(self):
        tokens = [t for t, _ in self.predictions]
        if len(set(tokens)) != len(tokens):
            raise ValueError("prediction tokens must be unique")
        log_probs = [lp for _, lp in self.predictions]
        if any(a < b for a, b in zip(log_probs, log_probs[1:])):
            raise ValueError("prediction log probabilities must be non-increasing")

    def top1(self) -> str | None:
        return self.predictions[0][0] if self.predictions else None


def request_payload(request: ScoreRequest) -> dict:
    return {
        "id": request.id,
        "op": "score",
        "text": request.text,
        "mask_index": request.mask_index,
        "top_k": request.top_k,
        "candidates": list(request.candidates) if request.candidates else None,
    }


def _record_from_payload(request: ScoreRequest, payload: Mapping, created_at: float) -> PredictionRecord:
    if payload.get("error") is not None:
        raise ScorerError(str(payload["error"]), retryable=bool(payload.get("retryable", False)))
    if payload.get("id") != request.id:
        raise ProtocolError(
            f"response id {payload.get('id')!r} does not match request {request.id!r}",
            raw=json.dumps(payload, ensure_ascii=False),
        )
    model_id = payload.get("model_id")
    predictions = payload.get("predictions")
    if not isinstance(model_id, str) or not isinstance(predictions, list):
        raise ProtocolError("response lacks model_id or predictions", raw=str(payload))
    pairs = []
    for entry in predictions:
        if not isinstance(entry, (list, tuple)) or len(entry) != 2:
            raise ProtocolError(f"bad prediction entry: {entry!r}")
        token, log_prob = entry
        pairs.append((str(token), float(log_prob)))
    if len(pairs) > request.top_k:
        raise ProtocolError(f"{len(pairs)} predictions exceed top_k {request.top_k}")
    if request.candidates is not None:
        allowed = set(request.candidates)
        stray = [t for t, _ in pairs if t not in allowed]
        if stray:
            raise ProtocolError(f"predictions outside the candidate set: {stray}")
    try:
        return PredictionRecord(request.id, model_id, tuple(pairs), created_at)
    except ValueError as exc:
        raise ProtocolError(str(exc)) from exc


class _InProcessBackend:
    """Shared submit/receive queue plumbing for the mock scorers."""

    model_id = "mock"
    mask_sentinel = MASK
    separator = SEPARATOR

    def __init__(self):
        self._pending: deque[dict] = deque()
        self.requests_served = 0

    def handshake(self) -> dict:
        return {
            "op": "ready",
            "model_id": self.model_id,
            "mask_sentinel": self.mask_sentinel,
            "separator": self.separator,
        }

    def submit(self, payload: Mapping) -> None:
        self.requests_served += 1
        self._pending.append(self._answer(payload))

    def receive(self) -> dict:
        if not self._pending:
            raise ProtocolError("receive called with no outstanding request")
        return self._pending.popleft()

    def close(self) -> None:
        self._pending.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()
        return False

    # dispatch

    def _answer(self, payload: Mapping) -> dict:
        rid = payload.get("id")
        op = payload.get("op")
        try:
            if op == "score":
                text = payload["text"]
                mask_index = int(payload["mask_index"])
                top_k = int(payload.get("top_k", 10))
                candidates = payload.get("candidates")
                if top_k < 1:
                    raise ValueError("top_k must be >= 1")
                if not 0 <= mask_index < text.count(self.mask_sentinel):
                    raise ValueError(f"mask_index {mask_index} out of range")
                predictions = self._score(text, mask_index, top_k, candidates)
                return {"id": rid, "model_id": self.model_id, "predictions": predictions}
            if op == "tokenize":
                label = payload.get("label")
                if not label:
                    raise ValueError("label must be non-empty")
                return {"id": rid, "n_tokens": self._n_tokens(str(label))}
            raise ValueError(f"unknown op {op!r}")
        except Exception as exc:  # noqa: BLE001 - every failure becomes an error reply
            return {"id": rid, "error": str(exc), "retryable": False}

    def _score(self, text: str, mask_index: int, top_k: int, candidates) -> list[list]:
        raise NotImplementedError

    def _n_tokens(self, label: str) -> int:
        raise NotImplementedError


@dataclass(frozen=True)
class MockScorerConfig:
    """Knobs of the deterministic mock: a fixed bias blended with text noise.

    subject_shift 0 makes the output identical for every text (pure bias);
    subject_shift 1 makes it depend entirely on a hash of the text.
    """

    bias: Mapping[str, float]
    subject_shift: float = 0.0
    vocab: tuple[str, ...] = ()
    seed: int = 0
    model_id: str = "mock"

    def __post_init__(self):
        if not self.bias:
            raise ValueError("bias distribution must be non-empty")
        total = sum(self.bias.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"bias weights sum to {total}, expected 1.0")
        if not 0.0 <= self.subject_shift <= 1.0:
            raise ValueError("subject_shift must lie in [0, 1]")


class MockScorer(_InProcessBackend):
    """Purely functional scorer: (config, request) fully determine the reply."""

    def __init__(self, config: MockScorerConfig):
        super().__init__()
        self.config = config
        self.model_id = config.model_id
        self._vocab = tuple(sorted(set(config.vocab) | set(config.bias)))
        self._vocab_lower = {t.lower() for t in self._vocab}
        self._base = np.array([config.bias.get(t, 0.0) for t in self._vocab], dtype=float)

    def _distribution(self, text: str) -> np.ndarray:
        shift = self.config.subject_shift
        if shift == 0.0:
            return self._base
        rng = make_rng(derive_seed(self.config.seed, "perturb", text))
        noise = rng.random(len(self._vocab))
        noise /= noise.sum()
        return (1.0 - shift) * self._base + shift * noise

    def _score(self, text: str, mask_index: int, top_k: int, candidates) -> list[list]:
        probs = self._distribution(text)
        allowed = set(candidates) if candidates else None
        order = sorted(range(len(self._vocab)), key=lambda i: (-probs[i], self._vocab[i]))
        out: list[list] = []
        for i in order:
            if probs[i] <= 0.0:
                break
            token = self._vocab[i]
            if allowed is not None and token not in allowed:
                continue
            out.append([token, float(np.log(probs[i]))])
            if len(out) == top_k:
                break
        return out

    def _n_tokens(self, label: str) -> int:
        # whitespace words; a known word is one token, an unknown one splits in two
        words = label.split()
        if len(words) > 1:
            return len(words)
        return 1 if label.strip().lower() in self._vocab_lower else 2


class ContextEchoScorer(MockScorer):
    """Mock that prefers any vocabulary word it can read in the context part."""

    def __init__(self, config: MockScorerConfig, echo_weight: float = 0.6):
        super().__init__(config)
        if not 0.0 < echo_weight < 1.0:
            raise ValueError("echo_weight must lie strictly between 0 and 1")
        self.echo_weight = echo_weight

    def _distribution(self, text: str) -> np.ndarray:
        base = super()._distribution(text)
        if self.separator not in text:
            return base
        context = text.rsplit(self.separator, 1)[0]
        found: tuple[int, str] | None = None
        for token in self._vocab:
            match = word_pattern(token).search(context)
            if match and (found is None or match.start() < found[0]):
                found = (match.start(), token)
        if found is None:
            return base
        echo = np.zeros_like(base)
        echo[self._vocab.index(found[1])] = 1.0
        return self.echo_weight * echo + (1.0 - self.echo_weight) * base


class TableScorer(_InProcessBackend):
    """Fixed text -> predictions lookup for precisely scripted tests."""

    def __init__(self, table: Mapping[str, Sequence[tuple[str, float]]], model_id: str = "table", vocab: Iterable[str] = ()):
        super().__init__()
        self.model_id = model_id
        self._table = {text: [[t, float(lp)] for t, lp in preds] for text, preds in table.items()}
        self._vocab_lower = {t.lower() for t in vocab} | {
            t.lower() for preds in self._table.values() for t, _ in preds
        }

    def _score(self, text: str, mask_index: int, top_k: int, candidates) -> list[list]:
        preds = self._table.get(text)
        if preds is None:
            raise ValueError(f"no table entry for text {text!r}")
        allowed = set(candidates) if candidates else None
        out = [p for p in preds if allowed is None or p[0] in allowed]
        return out[:top_k]

    def _n_tokens(self, label: str) -> int:
        words = label.split()
        if len(words) > 1:
            return len(words)
        return 1 if label.strip().lower() in self._vocab_lower else 2


class OfflineScorer:
    """Stand-in backend for cache-only replays; any actual request fails."""

    mask_sentinel = MASK
    separator = SEPARATOR

    def __init__(self, model_id: str):
        self.model_id = model_id
        self.requests_served = 0

    def submit(self, payload: Mapping) -> None:
        raise ScorerError("offline backend cannot serve requests", retryable=False)

    def receive(self) -> dict:
        raise ScorerError("offline backend cannot serve requests", retryable=False)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        return False


class SubprocessScorer:
    """Spawn a scorer command and talk the line protocol over its stdio."""

    def __init__(self, cmd: str | Sequence[str], timeout: float | None = 120.0):
        args = shlex.split(cmd) if isinstance(cmd, str) else list(cmd)
        try:
            self._proc = subprocess.Popen(
                args,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as exc:
            raise ScorerError(f"cannot start scorer {args!r}: {exc}") from exc
        self.timeout = timeout
        self.requests_served = 0
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

        ready = self._next_payload()
        if ready.get("op") != "ready" or "model_id" not in ready:
            raise ProtocolError(f"bad handshake: {ready!r}")
        self.model_id = str(ready["model_id"])
        self.mask_sentinel = str(ready.get("mask_sentinel", MASK))
        self.separator = str(ready.get("separator", SEPARATOR))

    def _pump(self):
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _next_payload(self) -> dict:
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            raise ScorerError(f"scorer gave no response within {self.timeout}s", retryable=True)
        if line is None:
            raise ScorerError("scorer closed its output stream", retryable=True)
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"malformed response line: {line!r}", raw=line) from exc
        if not isinstance(payload, dict):
            raise ProtocolError(f"response is not an object: {line!r}", raw=line)
        return payload

    def submit(self, payload: Mapping) -> None:
        try:
            self._proc.stdin.write(json.dumps(payload, ensure_ascii=False) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ScorerError(f"scorer pipe closed: {exc}", retryable=True) from exc
        self.requests_served += 1

    def receive(self) -> dict:
        return self._next_payload()

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()
        return False


def score(request: ScoreRequest, backend) -> PredictionRecord:
    """Send one request and validate the reply into a PredictionRecord."""
    backend.submit(request_payload(request))
    return _record_from_payload(request, backend.receive(), time.time())


def score_batch(
    requests: Sequence[ScoreRequest], backend, max_in_flight: int = 8
) -> list[PredictionRecord | ScorerError]:
    """Pipeline requests, keeping at most max_in_flight outstanding.

    Well-formed per-request error replies become ScorerError entries and the
    batch continues; transport-level failures (timeout, EOF, malformed or
    out-of-order lines) raise, because they poison everything behind them.
    """
    if max_in_flight < 1:
        raise ValueError("max_in_flight must be >= 1")
    ids = [r.id for r in requests]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate request ids in batch")

    results: list[PredictionRecord | ScorerError] = []
    pending: deque[ScoreRequest] = deque()

    def settle() -> None:
        request = pending.popleft()
        payload = backend.receive()
        try:
            results.append(_record_from_payload(request, payload, time.time()))
        except ProtocolError:
            raise
        except ScorerError as exc:
            results.append(exc)

    for request in requests:
        while len(pending) >= max_in_flight:
            settle()
        backend.submit(request_payload(request))
        pending.append(request)
    while pending:
        settle()
    return results


def cache_key(
    model_id: str,
    text: str,
    mask_index: int,
    top_k: int,
    candidates: Sequence[str] | None,
) -> str:
    canonical = json.dumps(
        {
            "model_id": model_id,
            "text": text,
            "mask_index": mask_index,
            "top_k": top_k,
            "candidates": sorted(candidates) if candidates else None,
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return sha256(canonical.encode("utf-8")).hexdigest()


class PredictionCache:
    """Append-only score cache: one `key \\t json_payload` line per entry.

    A single process appends while any number of readers replay; the file is
    the source of truth and is never rewritten in place.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, dict] = {}
        self.hits = 0
        self.misses = 0
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        data = self.path.read_bytes()
        offset = 0
        for raw_line in data.split(b"\n"):
            line_offset = offset
            offset += len(raw_line) + 1
            if not raw_line:
                continue
            try:
                line = raw_line.decode("utf-8")
            except UnicodeDecodeError:
                raise CacheError(f"{self.path}: undecodable cache line", line_offset)
            parts = line.split("\t", 1)
            if len(parts) != 2:
                raise CacheError(f"{self.path}: cache line without payload", line_offset)
            key, payload_text = parts
            try:
                payload = json.loads(payload_text)
            except json.JSONDecodeError:
                raise CacheError(f"{self.path}: unparsable cache payload", line_offset)
            if not isinstance(payload, dict):
                raise CacheError(f"{self.path}: cache payload is not an object", line_offset)
            self._entries[key] = payload

    def get(self, key: str) -> dict | None:
        return self._entries.get(key)

    def put(self, key: str, payload: dict) -> None:
        line = key + "\t" + json.dumps(payload, sort_keys=True, ensure_ascii=False) + "\n"
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as handle:
                handle.write(line)
            self._entries[key] = payload

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)


def _replay(request: ScoreRequest, payload: Mapping) -> PredictionRecord:
    return PredictionRecord(
        query_id=request.id,
        model_id=str(payload["model_id"]),
        predictions=tuple((str(t), float(lp)) for t, lp in payload["predictions"]),
        created_at=float(payload["created_at"]),
    )


def _store_payload(record: PredictionRecord) -> dict:
    return {
        "model_id": record.model_id,
        "predictions": [[t, lp] for t, lp in record.predictions],
        "created_at": record.created_at,
    }


def cached_score(request: ScoreRequest, backend, cache: PredictionCache) -> PredictionRecord:
    """score(), but transparently served from the cache when possible."""
    key = cache_key(backend.model_id, request.text, request.mask_index, request.top_k, request.candidates)
    payload = cache.get(key)
    if payload is None:
        record = score(request, backend)
        cache.put(key, _store_payload(record))
        cache.misses += 1
        return record
    cache.hits += 1
    return _replay(request, payload)


def score_all(
    requests: Sequence[ScoreRequest],
    backend,
    cache: PredictionCache | None = None,
    max_in_flight: int = 8,
) -> dict[str, PredictionRecord]:
    """Resolve every request through the cache, batching the misses.

    Any per-request failure aborts the whole run; partial results are not
    worth silently skewed metrics.
    """
    ids = [r.id for r in requests]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate request ids")
    records: dict[str, PredictionRecord] = {}
    missing: list[tuple[ScoreRequest, str]] = []
    if cache is None:
        missing = [(r, "") for r in requests]
    else:
        for request in requests:
            key = cache_key(
                backend.model_id, request.text, request.mask_index, request.top_k, request.candidates
            )
            payload = cache.get(key)
            if payload is None:
                missing.append((request, key))
            else:
                cache.hits += 1
                records[request.id] = _replay(request, payload)
    if missing:
        outcomes = score_batch([r for r, _ in missing], backend, max_in_flight)
        for (request, key), outcome in zip(missing, outcomes):
            if isinstance(outcome, ScorerError):
                raise ScorerError(
                    f"request {request.id} failed: {outcome}", retryable=outcome.retryable
                )
            if cache is not None:
                cache.put(key, _store_payload(outcome))
                cache.misses += 1
            records[request.id] = outcome
    return records


_tokenize_counter = 0


def is_single_token(label: str, backend) -> bool:
    """Ask the backend whether the label is one token of its vocabulary."""
    global _tokenize_counter
    _tokenize_counter += 1
    backend.submit({"id": f"tok-{_tokenize_counter}", "op": "tokenize", "label": label})
    payload = backend.receive()
    if payload.get("error") is not None:
        raise ScorerError(str(payload["error"]), retryable=bool(payload.get("retryable", False)))
    n_tokens = payload.get("n_tokens")
    if not isinstance(n_tokens, int) or n_tokens < 1:
        raise ProtocolError(f"bad n_tokens in reply: {payload!r}")
    return n_tokens == 1


def single_token_checker(backend):
    """Memoizing wrapper around is_single_token for corpus filtering."""
    verdicts: dict[str, bool] = {}

    def check(label: str) -> bool:
        if label not in verdicts:
            verdicts[label] = is_single_token(label, backend)
        return verdicts[label]

    return check
