"""Probe-text builders for the prompt, case, context, and reconstruction setups.

Every builder returns a Query whose id is a stable content hash, so the same
probe text always maps to the same scoring request no matter which run
produced it.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import ContextRecord, Fact, FactSet, PromptTemplate, OBJECT_SLOT, SUBJECT_SLOT
from .seeding import make_rng
from .sentinels import MASK, SEPARATOR

PARADIGMS = ("prompt", "prompt_only", "case", "context", "context_masked", "reconstruction")

# paradigms whose gold answer must not leak into the scanned part of the text
_LEAK_CHECKED = {"case", "context_masked", "reconstruction"}

_OBJECT_MARK = "\x00OBJ\x00"  # never survives into query text


class QueryError(ValueError):
    """A probe text cannot be built from the given pieces."""


class CaseSamplingError(RuntimeError):
    """Too few eligible facts to illustrate a relation."""

    def __init__(self, message: str, eligible: int):
        super().__init__(message)
        self.eligible = eligible


def query_id(text: str, target_mask_index: int, paradigm: str) -> str:
    payload = f"{paradigm}\x1f{target_mask_index}\x1f{text}".encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:16]


def word_pattern(word: str) -> re.Pattern:
    """Whole-word, case-insensitive matcher; one definition for all leak checks."""
    return re.compile(rf"(?<!\w){re.escape(word)}(?!\w)", re.IGNORECASE)


def contains_answer(context_text: str, gold_label: str) -> bool:
    """Whole-word, case-insensitive containment; 'Californian' != 'California'."""
    if not gold_label:
        return False
    return word_pattern(gold_label).search(context_text) is not None


def mask_answer_in_context(context_text: str, gold_label: str) -> tuple[str, int]:
    """Mask every whole-word occurrence of the answer; punctuation survives."""
    masked, count = word_pattern(gold_label).subn(MASK, context_text)
    if count == 0:
        raise QueryError(f"answer {gold_label!r} does not occur in the context")
    return masked, count


def _leak_scan_region(paradigm: str, text: str) -> str:
    # for case and masked-context queries only the part before the final
    # separator is guaranteed leak-free; the target segment may repeat the
    # gold inside the subject label itself
    if paradigm == "reconstruction":
        return text
    head, sep, _ = text.rpartition(f" {SEPARATOR} ")
    return head if sep else ""


@dataclass(frozen=True)
class Query:
    """One scoring request: a probe text plus which mask to read."""

    query_id: str
    text: str
    target_mask_index: int
    paradigm: str
    fact_key: tuple[str, str]
    gold_label: str

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise QueryError(f"unknown paradigm {self.paradigm!r}")
        masks = self.text.count(MASK)
        if not 0 <= self.target_mask_index < masks:
            raise QueryError(
                f"target mask {self.target_mask_index} out of range for {masks} masks"
            )
        if self.query_id != query_id(self.text, self.target_mask_index, self.paradigm):
            raise QueryError("query id does not match its content hash")
        if self.gold_label and self.paradigm in _LEAK_CHECKED:
            region = _leak_scan_region(self.paradigm, self.text)
            if contains_answer(region, self.gold_label):
                raise QueryError(
                    f"gold answer {self.gold_label!r} leaks into a {self.paradigm} query"
                )


def _make_query(text: str, target: int, paradigm: str, fact_key: tuple[str, str], gold: str) -> Query:
    return Query(query_id(text, target, paradigm), text, target, paradigm, fact_key, gold)


def _render_marked(template: PromptTemplate, subject_text: str) -> str:
    """Substitute the slots, leaving a private marker where the object goes."""
    if not subject_text:
        raise QueryError(f"empty subject for relation {template.relation_id}")
    if MASK in subject_text:
        raise QueryError(f"subject text contains the mask sentinel: {subject_text!r}")
    out = template.pattern.replace(SUBJECT_SLOT, subject_text)
    out = out.replace(OBJECT_SLOT, _OBJECT_MARK)
    return re.sub(r"\s+", " ", out).strip()


def render_prompt(template: PromptTemplate, subject_label: str, object_text: str | None = None) -> str:
    """Fill the template; object_text of None leaves a mask in the object slot."""
    marked = _render_marked(template, subject_label)
    return marked.replace(_OBJECT_MARK, MASK if object_text is None else object_text)


def _finish(marked_text: str, paradigm: str, fact_key: tuple[str, str], gold: str) -> Query:
    """Turn the object marker into the target mask and index it."""
    target = marked_text[: marked_text.index(_OBJECT_MARK)].count(MASK)
    return _make_query(marked_text.replace(_OBJECT_MARK, MASK), target, paradigm, fact_key, gold)


def build_prompt_query(fact: Fact, template: PromptTemplate) -> Query:
    """Subject filled in, answer masked: the basic probe."""
    if fact.relation_id != template.relation_id:
        raise QueryError(
            f"fact relation {fact.relation_id} does not match template {template.relation_id}"
        )
    marked = _render_marked(template, fact.subject_label)
    return _finish(marked, "prompt", (fact.subject_id, fact.relation_id), fact.object_label)


_SUBJECT_MARK = "\x00SUBJ\x00"


def build_prompt_only_query(template: PromptTemplate) -> Query:
    """Both slots masked; reading the object mask shows the template's own bias."""
    # the subject goes in as a marker because _render_marked refuses literal masks
    marked = _render_marked(template, _SUBJECT_MARK).replace(_SUBJECT_MARK, MASK)
    return _finish(marked, "prompt_only", ("", template.relation_id), "")


def eligible_cases(factset: FactSet, target: Fact) -> list[Fact]:
    """Facts usable to illustrate the target without leaking its answer.

    A case must have a different subject, and neither its subject nor its
    object may contain the target's gold answer as a whole word.
    """
    gold = target.object_label
    return [
        f
        for f in factset
        if f.subject_id != target.subject_id
        and not contains_answer(f.subject_label, gold)
        and not contains_answer(f.object_label, gold)
    ]


@dataclass(frozen=True)
class CaseSample:
    """The illustrative facts drawn for one target fact."""

    target_key: tuple[str, str, str]
    cases: tuple[Fact, ...]
    seed: int


def sample_cases(factset: FactSet, target: Fact, n: int = 10, seed: int = 0) -> CaseSample:
    """Draw n eligible illustration facts without replacement, seeded."""
    if n < 0:
        raise ValueError("n must be >= 0")
    pool = eligible_cases(factset, target)
    if len(pool) < n:
        raise CaseSamplingError(
            f"only {len(pool)} eligible cases for {target.key}, need {n}",
            eligible=len(pool),
        )
    if n == 0:
        return CaseSample(target.key, (), seed)
    picks = make_rng(seed).choice(len(pool), size=n, replace=False)
    return CaseSample(target.key, tuple(pool[i] for i in picks), seed)


def build_case_query(fact: Fact, cases: CaseSample, template: PromptTemplate) -> Query:
    """Solved analogies joined by the separator, target segment masked last."""
    segments = [
        render_prompt(template, case.subject_label, case.object_label)
        for case in cases.cases
    ]
    segments.append(_render_marked(template, fact.subject_label))
    marked = f" {SEPARATOR} ".join(segments)
    return _finish(marked, "case", (fact.subject_id, fact.relation_id), fact.object_label)


def build_context_query(fact: Fact, context: ContextRecord, template: PromptTemplate) -> Query:
    """Retrieved context, separator, then the masked prompt. Context is verbatim."""
    if MASK in context.text:
        raise QueryError("context text already contains the mask sentinel")
    if context.query_key != (fact.subject_id, fact.relation_id):
        raise QueryError(f"context {context.query_key} does not belong to fact {fact.key}")
    marked = context.text + f" {SEPARATOR} " + _render_marked(template, fact.subject_label)
    return _finish(marked, "context", (fact.subject_id, fact.relation_id), fact.object_label)


def build_masked_context_query(fact: Fact, context: ContextRecord, template: PromptTemplate) -> Query:
    """Context query with every occurrence of the answer masked out first."""
    if MASK in context.text:
        raise QueryError("context text already contains the mask sentinel")
    if context.query_key != (fact.subject_id, fact.relation_id):
        raise QueryError(f"context {context.query_key} does not belong to fact {fact.key}")
    masked_context, _ = mask_answer_in_context(context.text, fact.object_label)
    marked = masked_context + f" {SEPARATOR} " + _render_marked(template, fact.subject_label)
    return _finish(marked, "context_masked", (fact.subject_id, fact.relation_id), fact.object_label)


def build_reconstruction_query(masked_context: str, fact: Fact | None = None) -> Query:
    """The masked context alone; can the model restore its first masked slot?"""
    if MASK not in masked_context:
        raise QueryError("reconstruction input must contain at least one mask")
    fact_key = (fact.subject_id, fact.relation_id) if fact else ("", "")
    gold = fact.object_label if fact else ""
    return _make_query(masked_context, 0, "reconstruction", fact_key, gold)


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            out.append({"\\": "\\", "t": "\t", "n": "\n"}.get(nxt, nxt))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def write_queries(queries: Iterable[Query], path: str | Path) -> None:
    """Newline-delimited query records; tabs inside the text are escaped."""
    with open(path, "w", encoding="utf-8") as handle:
        for q in queries:
            handle.write(
                f"{q.query_id}\t{q.paradigm}\t{q.target_mask_index}"
                f"\t{_escape(q.gold_label)}\t{_escape(q.text)}\n"
            )


def read_queries(path: str | Path) -> list[Query]:
    queries = []
    with open(path, encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 5:
                raise QueryError(f"{path}:{lineno}: expected 5 fields, got {len(fields)}")
            qid, paradigm, target, gold, text = fields
            queries.append(
                Query(qid, _unescape(text), int(target), paradigm, ("", ""), _unescape(gold))
            )
    return queries
