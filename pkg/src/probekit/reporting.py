"""Metric tables: deterministic CSV emission and the markdown view of it.

metrics.csv is the source of truth; report.md is rendered from the parsed
CSV strings verbatim, so every number in the report exists in the CSV and
reruns are byte-identical.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

CSV_COLUMNS = ("section", "relation", "metric", "value", "count")

MACRO = "macro"  # unweighted mean over relations
ALL = "all"  # micro aggregate over every query


@dataclass(frozen=True)
class MetricRow:
    section: str
    relation: str
    metric: str
    value: float | int | None
    count: int | None = None


def format_value(value: float | int | None) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    return f"{value:.6f}"


def _relation_rank(relation: str) -> int:
    return {ALL: 1, MACRO: 2}.get(relation, 0)


class MetricsReport:
    """Accumulates metric rows and writes them in a stable order."""

    def __init__(self):
        self.rows: list[MetricRow] = []

    def add(
        self,
        section: str,
        relation: str,
        metric: str,
        value: float | int | None,
        count: int | None = None,
    ) -> None:
        self.rows.append(MetricRow(section, relation, metric, value, count))

    def add_macro(self, section: str, metric: str) -> None:
        """Append the unweighted mean of the per-relation values of a metric."""
        values = [
            row.value
            for row in self.rows
            if row.section == section
            and row.metric == metric
            and row.relation not in (MACRO, ALL)
            and row.value is not None
        ]
        if not values:
            raise ValueError(f"no per-relation values for {section}/{metric}")
        self.add(section, MACRO, metric, sum(values) / len(values), count=len(values))

    def sorted_rows(self) -> list[MetricRow]:
        return sorted(
            self.rows,
            key=lambda r: (r.section, _relation_rank(r.relation), r.relation, r.metric),
        )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for row in self.sorted_rows():
                writer.writerow(
                    [
                        row.section,
                        row.relation,
                        row.metric,
                        format_value(row.value),
                        "" if row.count is None else str(row.count),
                    ]
                )


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        return list(reader)


def render_markdown(rows: list[dict[str, str]], title: str = "Metrics report") -> str:
    """One markdown table per section, all numbers verbatim from the CSV."""
    lines = [f"# {title}", ""]
    sections: dict[str, list[dict[str, str]]] = {}
    for row in rows:
        sections.setdefault(row["section"], []).append(row)
    for section in sorted(sections):
        lines.append(f"## {section}")
        lines.append("")
        lines.append("| relation | metric | value | count |")
        lines.append("| --- | --- | --- | --- |")
        for row in sections[section]:
            count = row.get("count") or ""
            lines.append(
                f"| {row['relation']} | {row['metric']} | {row['value']} | {count} |"
            )
        lines.append("")
    return "\n".join(lines) + "\n"


def write_report(csv_path: str | Path, md_path: str | Path, title: str = "Metrics report") -> None:
    rows = read_csv(csv_path)
    Path(md_path).write_text(render_markdown(rows, title), encoding="utf-8")
