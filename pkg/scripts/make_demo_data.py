#!/usr/bin/env python3
"""Generate a small synthetic corpus plus a mock scorer config.

The output directory is ready for every probekit subcommand: facts, one
manual prompt per relation, contexts (some of which mention the answer),
a two-level taxonomy over the answer entities, and mock.json for
probekit.mockserver. Everything is a pure function of --seed.
"""

import argparse
import json
import random
from pathlib import Path

RELATIONS = {
    "R_capital": {
        "template": "[X] is the capital of [Y] .",
        "answers": ["France", "Italy", "Spain", "Portugal", "Germany"],
        "group": "C_country",
        "context": "{subj} is an old city and the seat of government of {answer} .",
        "filler": "{subj} is an old city with busy streets .",
    },
    "R_field": {
        "template": "[X] works in the field of [Y] .",
        "answers": ["physics", "chemistry", "biology", "geology"],
        "group": "C_field",
        "context": "{subj} published several papers on {answer} .",
        "filler": "{subj} taught for many years at the academy .",
    },
    "R_language": {
        "template": "The native language of [X] is [Y] .",
        "answers": ["French", "Italian", "Spanish", "German"],
        "group": "C_language",
        "context": "{subj} grew up speaking {answer} at home .",
        "filler": "{subj} grew up in a small village .",
    },
}

SYLLABLES = ["ba", "do", "ka", "li", "mo", "na", "pe", "ra", "su", "ti", "ve", "zo"]


def subject_name(rng):
    name = "".join(rng.choice(SYLLABLES) for _ in range(rng.randint(2, 3)))
    return name.capitalize()


def skewed_choice(rng, options):
    # earlier options are a few times more likely, so frequencies are uneven
    weights = [1.0 / (i + 1) for i in range(len(options))]
    return rng.choices(options, weights=weights, k=1)[0]


def write_rows(path, rows):
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write("\t".join(row) + "\n")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="directory to fill")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--facts-per-relation", type=int, default=40)
    parser.add_argument("--context-share", type=float, default=0.7,
                        help="share of facts that get a context sentence")
    parser.add_argument("--leak-share", type=float, default=0.5,
                        help="share of contexts that mention the answer")
    args = parser.parse_args()

    rng = random.Random(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    facts, prompts, contexts, edges, labels = [], [], [], [], []
    object_ids = {}
    seen_subjects = set()

    for relation_id, recipe in sorted(RELATIONS.items()):
        prompts.append((relation_id, recipe["template"]))
        edges.append((recipe["group"], "C_entity", "subclass_of"))
        labels.append((recipe["group"], recipe["group"].removeprefix("C_").capitalize()))
        for answer in recipe["answers"]:
            obj_id = object_ids.setdefault(answer, f"O{len(object_ids)}")
            edges.append((obj_id, recipe["group"], "instance_of"))
            labels.append((obj_id, answer))

        for i in range(args.facts_per_relation):
            while True:
                label = subject_name(rng)
                if label not in seen_subjects:
                    seen_subjects.add(label)
                    break
            subject_id = f"S_{relation_id}_{i}"
            answer = skewed_choice(rng, recipe["answers"])
            facts.append((subject_id, label, relation_id, object_ids[answer], answer))
            if rng.random() < args.context_share:
                template = recipe["context"] if rng.random() < args.leak_share else recipe["filler"]
                contexts.append((subject_id, relation_id, template.format(subj=label, answer=answer)))

    labels.append(("C_entity", "Entity"))
    write_rows(out / "facts.tsv", facts)
    write_rows(out / "prompts.tsv", prompts)
    write_rows(out / "contexts.tsv", contexts)
    write_rows(out / "edges.tsv", sorted(set(edges)))
    write_rows(out / "labels.tsv", sorted(set(labels)))

    # bias roughly tracks global answer frequency, so the mock looks like a
    # model with a strong prior and a weak link to the subject
    counts = {}
    for _, _, _, _, answer in facts:
        counts[answer] = counts.get(answer, 0) + 1
    total = sum(counts.values())
    bias = {token: round(n / total, 6) for token, n in sorted(counts.items())}
    mock = {
        "mode": "biased",
        "bias": bias,
        "subject_shift": 0.35,
        "seed": args.seed,
        "model_id": "demo-mock",
    }
    (out / "mock.json").write_text(json.dumps(mock, indent=2) + "\n")
    echo = dict(mock, mode="context_echo", model_id="demo-echo")
    (out / "mock_echo.json").write_text(json.dumps(echo, indent=2) + "\n")

    print(f"wrote {len(facts)} facts, {len(contexts)} contexts, "
          f"{len(set(edges))} edges under {out}")


if __name__ == "__main__":
    main()
