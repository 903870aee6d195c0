#!/usr/bin/env python3
"""Convert the public LAMA T-REx dump into probekit TSV inputs.

Expects the upstream layout: one JSONL file per relation (P17.jsonl, ...)
where each line carries sub_uri/sub_label/obj_uri/obj_label plus optional
evidences, and a relations.jsonl with one cloze template per relation.

    python3 scripts/convert_lama_trex.py \
        --trex data/TREx --relations data/relations.jsonl --out corpus/

Writes facts.tsv, prompts.tsv and contexts.tsv. Context sentences come
from the first usable masked_sentence of each fact, with the mask filled
back in with the object surface form, so the answer is present verbatim
(the leakage experiment re-detects and re-masks it on its own terms).
"""

import argparse
import json
import logging
from pathlib import Path

log = logging.getLogger("convert_lama_trex")

MASK = "[MASK]"


def iter_jsonl(path):
    with open(path, encoding="utf-8") as handle:
        for n, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError:
                log.warning("%s:%d: unparseable line skipped", path, n)


def clean(text):
    return " ".join(text.split())


def context_from_evidences(evidences, obj_label):
    for evidence in evidences or []:
        sentence = evidence.get("masked_sentence") or ""
        if MASK not in sentence:
            continue
        surface = evidence.get("obj_surface") or obj_label
        return clean(sentence.replace(MASK, surface))
    return None


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--trex", required=True, help="directory of per-relation JSONL files")
    parser.add_argument("--relations", required=True, help="relations.jsonl with templates")
    parser.add_argument("--out", required=True)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")

    templates = {}
    for row in iter_jsonl(args.relations):
        relation_id = row.get("relation")
        template = clean(row.get("template") or "")
        if relation_id and "[X]" in template and "[Y]" in template:
            templates[relation_id] = template

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    facts, contexts = [], []
    seen_facts, seen_contexts = set(), set()
    dropped = 0

    files = sorted(Path(args.trex).glob("*.jsonl"))
    if not files:
        raise SystemExit(f"no *.jsonl files under {args.trex}")
    for path in files:
        for row in iter_jsonl(path):
            relation_id = row.get("predicate_id") or path.stem
            fields = (row.get("sub_uri"), row.get("sub_label"),
                      row.get("obj_uri"), row.get("obj_label"))
            if not all(fields) or any("\t" in f or "\n" in f for f in fields):
                dropped += 1
                continue
            sub_uri, sub_label, obj_uri, obj_label = (clean(f) for f in fields)
            key = (sub_uri, relation_id, obj_uri)
            if key in seen_facts:
                continue
            seen_facts.add(key)
            facts.append((sub_uri, sub_label, relation_id, obj_uri, obj_label))

            sentence = context_from_evidences(row.get("evidences"), obj_label)
            ckey = (sub_uri, relation_id)
            if sentence and "\t" not in sentence and ckey not in seen_contexts:
                seen_contexts.add(ckey)
                contexts.append((sub_uri, relation_id, sentence))

    relations_seen = {f[2] for f in facts}
    prompts = [(r, templates[r]) for r in sorted(relations_seen) if r in templates]
    missing = relations_seen - set(templates)
    if missing:
        log.warning("no template for %d relations: %s", len(missing),
                    ", ".join(sorted(missing)[:5]))

    for name, rows in (("facts.tsv", facts), ("prompts.tsv", prompts),
                       ("contexts.tsv", contexts)):
        with open(out / name, "w", encoding="utf-8") as handle:
            for row in rows:
                handle.write("\t".join(row) + "\n")

    log.info("wrote %d facts, %d prompts, %d contexts (%d rows dropped)",
             len(facts), len(prompts), len(contexts), dropped)


if __name__ == "__main__":
    main()
