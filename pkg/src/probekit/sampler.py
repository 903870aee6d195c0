"""Answer histograms and uniform-answer evaluation subsets.

The uniform subset construction removes the head of a relation's answer
distribution: facts are grouped by object, groups rarer than the median
frequency are deleted, and groups more frequent than the median are
downsampled to it, leaving every surviving answer equally frequent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import Fact, FactSet
from .distributions import Distribution
from .seeding import make_rng

log = logging.getLogger(__name__)

DEFAULT_PRESAMPLE_CAP = 50_000


@dataclass(frozen=True)
class ObjectGroup:
    """All facts of one relation sharing the same answer entity."""

    object_id: str
    object_label: str
    frequency: int

    def __post_init__(self):
        if self.frequency < 1:
            raise ValueError("object group frequency must be >= 1")


@dataclass(frozen=True)
class UniformSampleReport:
    relation_id: str
    median_frequency: int
    groups_kept: int
    groups_deleted: int
    facts_out: int

    def __post_init__(self):
        if self.facts_out != self.groups_kept * self.median_frequency:
            raise ValueError(
                "facts_out must equal groups_kept * median_frequency: "
                f"{self.facts_out} != {self.groups_kept} * {self.median_frequency}"
            )


def answer_histogram(factset: FactSet) -> Distribution:
    """Relative frequency of each answer label in the fact set."""
    if not len(factset):
        raise ValueError(f"empty fact set for relation {factset.relation_id}")
    counts: dict[str, int] = {}
    for fact in factset:
        counts[fact.object_label] = counts.get(fact.object_label, 0) + 1
    return Distribution.from_counts(counts)


def object_groups(factset: FactSet) -> list[ObjectGroup]:
    """Group sizes per answer entity, ordered by object id."""
    grouped: dict[str, list[Fact]] = {}
    for fact in factset:
        grouped.setdefault(fact.object_id, []).append(fact)
    return [
        ObjectGroup(object_id, facts[0].object_label, len(facts))
        for object_id, facts in sorted(grouped.items())
    ]


def lower_median(values: Sequence[int]) -> int:
    """The floor((n+1)/2)-th smallest value; no interpolation."""
    if not values:
        raise ValueError("lower_median of empty sequence")
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def presample(factset: FactSet, cap: int = DEFAULT_PRESAMPLE_CAP, seed: int = 0) -> FactSet:
    """Uniform random subset of at most cap facts; identity when already small."""
    if cap < 1:
        raise ValueError("presample cap must be >= 1")
    if len(factset) <= cap:
        return factset
    rng = make_rng(seed)
    picks = rng.choice(len(factset), size=cap, replace=False)
    return FactSet.build(factset.relation_id, (factset.facts[i] for i in picks))


def build_uniform_subset(factset: FactSet, seed: int = 0) -> tuple[FactSet, UniformSampleReport]:
    """Equalize answer frequencies at the lower median of the group sizes.

    Groups above the median are downsampled with the seeded generator,
    groups at the median survive whole, groups below it are deleted.
    """
    if not len(factset):
        raise ValueError(f"empty fact set for relation {factset.relation_id}")
    grouped: dict[str, list[Fact]] = {}
    for fact in factset:
        grouped.setdefault(fact.object_id, []).append(fact)
    median = lower_median([len(facts) for facts in grouped.values()])

    rng = make_rng(seed)
    kept: list[Fact] = []
    groups_kept = 0
    groups_deleted = 0
    for object_id, facts in sorted(grouped.items()):
        if len(facts) < median:
            groups_deleted += 1
            continue
        groups_kept += 1
        if len(facts) == median:
            kept.extend(facts)
        else:
            picks = rng.choice(len(facts), size=median, replace=False)
            kept.extend(facts[i] for i in picks)
    subset = FactSet.build(factset.relation_id, kept)
    report = UniformSampleReport(
        relation_id=factset.relation_id,
        median_frequency=median,
        groups_kept=groups_kept,
        groups_deleted=groups_deleted,
        facts_out=len(subset),
    )
    return subset, report


def write_sample_reports(reports: Iterable[UniformSampleReport], path: str | Path) -> None:
    """One tab-separated report line per relation."""
    with open(path, "w", encoding="utf-8") as handle:
        for r in sorted(reports, key=lambda r: r.relation_id):
            handle.write(
                f"{r.relation_id}\t{r.median_frequency}\t{r.groups_kept}"
                f"\t{r.groups_deleted}\t{r.facts_out}\n"
            )
