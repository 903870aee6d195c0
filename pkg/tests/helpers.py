"""Shared fixture builders for the probekit test suite."""

from probekit.corpus import Fact, FactSet


def write_tsv(path, rows):
    path.write_text("".join("\t".join(str(c) for c in row) + "\n" for row in rows), encoding="utf-8")
    return path


def make_factset(relation_id, triples):
    """triples: (subject_id, subject_label, object_id, object_label)."""
    facts = [Fact(s, sl, relation_id, o, ol) for s, sl, o, ol in triples]
    return FactSet.build(relation_id, facts)


BIAS = {"France": 0.3, "Italy": 0.25, "Spain": 0.2, "physics": 0.15, "chemistry": 0.1}
