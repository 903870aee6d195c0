"""Ingestion of fact triples, prompt catalogs, and retrieved contexts.

All corpus files are tab-separated, one record per line, UTF-8. Loaders are
strict: malformed lines are reported with their line number rather than
skipped, so silent corpus drift cannot happen.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable
from dataclasses import dataclass
from pathlib import Path

from .sentinels import MASK

log = logging.getLogger(__name__)

SUBJECT_SLOT = "[X]"
OBJECT_SLOT = "[Y]"
PROMPT_SOURCES = ("manual", "mined", "auto")


class FormatError(ValueError):
    """A corpus file violates its line format or a record invariant."""


def _no_tabs(value: str, what: str) -> None:
    if "\t" in value or "\n" in value:
        raise FormatError(f"{what} must not contain tabs or newlines: {value!r}")


@dataclass(frozen=True)
class Fact:
    """One (subject, relation, object) triple with display labels."""

    subject_id: str
    subject_label: str
    relation_id: str
    object_id: str
    object_label: str

    def __post_init__(self):
        for name in ("subject_id", "subject_label", "relation_id", "object_id", "object_label"):
            if not getattr(self, name):
                raise FormatError(f"fact field {name} must be non-empty")
        if MASK in self.object_label:
            raise FormatError(f"object label contains the mask sentinel: {self.object_label!r}")

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.subject_id, self.relation_id, self.object_id)


@dataclass(frozen=True)
class FactSet:
    """All loaded facts of one relation, in canonical order."""

    relation_id: str
    facts: tuple[Fact, ...]

    def __post_init__(self):
        for fact in self.facts:
            if fact.relation_id != self.relation_id:
                raise FormatError(
                    f"fact relation {fact.relation_id} does not match set {self.relation_id}"
                )

    @classmethod
    def build(cls, relation_id: str, facts: Iterable[Fact]) -> "FactSet":
        ordered = tuple(sorted(facts, key=lambda f: (f.subject_id, f.object_id)))
        return cls(relation_id, ordered)

    def __len__(self) -> int:
        return len(self.facts)

    def __iter__(self):
        return iter(self.facts)


@dataclass(frozen=True)
class PromptTemplate:
    """A cloze pattern with one subject slot [X] and one object slot [Y]."""

    relation_id: str
    pattern: str
    source: str

    def __post_init__(self):
        if self.source not in PROMPT_SOURCES:
            raise FormatError(f"unknown prompt source {self.source!r}")
        for slot in (SUBJECT_SLOT, OBJECT_SLOT):
            if self.pattern.count(slot) != 1:
                raise FormatError(
                    f"pattern for {self.relation_id} must contain exactly one {slot}: "
                    f"{self.pattern!r}"
                )
        if MASK in self.pattern:
            raise FormatError(f"pattern for {self.relation_id} contains the mask sentinel")


@dataclass(frozen=True)
class ContextRecord:
    """Retrieved supporting text for one (subject, relation) query."""

    subject_id: str
    relation_id: str
    text: str

    def __post_init__(self):
        if not self.text:
            raise FormatError(
                f"empty context for ({self.subject_id}, {self.relation_id})"
            )

    @property
    def query_key(self) -> tuple[str, str]:
        return (self.subject_id, self.relation_id)


def _read_lines(path: str | Path) -> Iterable[tuple[int, str]]:
    with open(path, encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            yield lineno, line


def load_facts(path: str | Path) -> list[FactSet]:
    """Load a facts file into one FactSet per relation, sorted by relation id.

    Exact duplicate triples are dropped with a logged count. The same
    (subject, relation, object) key appearing with different labels is an
    error, as is any malformed line.
    """
    seen: dict[tuple[str, str, str], Fact] = {}
    duplicates = 0
    for lineno, line in _read_lines(path):
        fields = line.split("\t")
        if len(fields) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
        try:
            fact = Fact(*fields)
        except FormatError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        prior = seen.get(fact.key)
        if prior is None:
            seen[fact.key] = fact
        elif prior == fact:
            duplicates += 1
        else:
            raise FormatError(
                f"{path}:{lineno}: triple {fact.key} repeats with different labels"
            )
    if duplicates:
        log.info("dropped %d duplicate facts from %s", duplicates, path)
    by_relation: dict[str, list[Fact]] = {}
    for fact in seen.values():
        by_relation.setdefault(fact.relation_id, []).append(fact)
    return [
        FactSet.build(relation_id, facts)
        for relation_id, facts in sorted(by_relation.items())
    ]


def write_facts(factsets: Iterable[FactSet], path: str | Path) -> None:
    """Serialize fact sets in the canonical facts file format."""
    with open(path, "w", encoding="utf-8") as handle:
        for factset in sorted(factsets, key=lambda fs: fs.relation_id):
            for f in factset:
                for field in (f.subject_id, f.subject_label, f.relation_id, f.object_id, f.object_label):
                    _no_tabs(field, "fact field")
                handle.write(
                    f"{f.subject_id}\t{f.subject_label}\t{f.relation_id}\t{f.object_id}\t{f.object_label}\n"
                )


def load_prompts(path: str | Path, source: str) -> dict[str, PromptTemplate]:
    """Load one prompt catalog; at most one pattern per relation."""
    templates: dict[str, PromptTemplate] = {}
    for lineno, line in _read_lines(path):
        fields = line.split("\t")
        if len(fields) != 2:
            raise FormatError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(fields)}")
        relation_id, pattern = fields
        if relation_id in templates:
            raise FormatError(f"{path}:{lineno}: duplicate pattern for relation {relation_id}")
        try:
            templates[relation_id] = PromptTemplate(relation_id, pattern, source)
        except FormatError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return templates


def load_contexts(path: str | Path) -> dict[tuple[str, str], ContextRecord]:
    """Load retrieved contexts keyed by (subject_id, relation_id)."""
    contexts: dict[tuple[str, str], ContextRecord] = {}
    for lineno, line in _read_lines(path):
        fields = line.split("\t")
        if len(fields) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
        try:
            record = ContextRecord(*fields)
        except FormatError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        if record.query_key in contexts:
            raise FormatError(f"{path}:{lineno}: duplicate context for {record.query_key}")
        contexts[record.query_key] = record
    return contexts


def filter_single_token(factset: FactSet, is_single_token: Callable[[str], bool]) -> FactSet:
    """Keep only facts whose object label is a single token for the scorer.

    The predicate is consulted for every distinct label; any failure it
    raises propagates, so no label passes untested.
    """
    verdicts: dict[str, bool] = {}
    kept = []
    for fact in factset:
        verdict = verdicts.get(fact.object_label)
        if verdict is None:
            verdict = bool(is_single_token(fact.object_label))
            verdicts[fact.object_label] = verdict
        if verdict:
            kept.append(fact)
    return FactSet(factset.relation_id, tuple(kept))
