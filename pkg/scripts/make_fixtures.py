#!/usr/bin/env python3
"""Generate the committed corpus fixture: 30 train and 10 test instances
over two entity-type pairs, three relations each, every sentence unique.

Deterministic for a fixed seed, so re-running reproduces the committed
files byte for byte.
"""

from __future__ import annotations

import argparse
import json
import random
from pathlib import Path

SEED = 20240811

ORGS = [
    ["Acme", "Industries"],
    ["Bolt", "Dynamics"],
    ["Cyan", "Corp"],
    ["Delta", "Holdings"],
    ["Echo", "Systems"],
    ["Fathom", "Labs"],
    ["Granite", "Partners"],
    ["Helix", "Group"],
    ["Ion", "Works"],
    ["Juniper", "Capital"],
    ["Krill", "Logistics"],
    ["Lumen", "Trading"],
]

PEOPLE = [
    ["Alice", "Smith"],
    ["Bob", "Jones"],
    ["Carol", "Nguyen"],
    ["Dan", "Brown"],
    ["Erin", "Garcia"],
    ["Frank", "Ito"],
    ["Grace", "Okafor"],
    ["Hugo", "Lindt"],
    ["Irene", "Park"],
    ["Jonas", "Weber"],
]

YEARS = [str(y) for y in range(1999, 2024)]
AMOUNTS = ["$2M", "$14M", "$90M", "$1.2B", "$340M", "$55M"]

# each template yields (tokens, e1_span, e2_span); e1 is always the first
# schema argument for the pair, wherever it sits in the sentence
ORG_PER_TEMPLATES = {
    "employee_of": [
        lambda org, per, rng: _place(
            [*per, "has", "worked", "at", *org, "since", rng.choice(YEARS)],
            e1=(5, 5 + len(org)),
            e2=(0, len(per)),
        ),
        lambda org, per, rng: _place(
            [*org, "promoted", *per, "to", "regional", "manager"],
            e1=(0, len(org)),
            e2=(len(org) + 1, len(org) + 1 + len(per)),
        ),
    ],
    "founder_of": [
        lambda org, per, rng: _place(
            [*org, "was", "founded", "by", *per, "in", rng.choice(YEARS)],
            e1=(0, len(org)),
            e2=(len(org) + 3, len(org) + 3 + len(per)),
        ),
        lambda org, per, rng: _place(
            [*per, "started", *org, "out", "of", "a", "garage"],
            e1=(len(per) + 1, len(per) + 1 + len(org)),
            e2=(0, len(per)),
        ),
    ],
    "no_relation": [
        lambda org, per, rng: _place(
            [*per, "visited", "the", *org, "booth", "at", "the", "expo"],
            e1=(len(per) + 2, len(per) + 2 + len(org)),
            e2=(0, len(per)),
        ),
        lambda org, per, rng: _place(
            [*per, "wrote", "a", "column", "mentioning", *org],
            e1=(len(per) + 4, len(per) + 4 + len(org)),
            e2=(0, len(per)),
        ),
    ],
}

ORG_ORG_TEMPLATES = {
    "acquired_by": [
        lambda a, b, rng: _place(
            [*a, "was", "acquired", "by", *b, "for", rng.choice(AMOUNTS)],
            e1=(0, len(a)),
            e2=(len(a) + 3, len(a) + 3 + len(b)),
        ),
        lambda a, b, rng: _place(
            [*b, "completed", "its", "purchase", "of", *a, "in", rng.choice(YEARS)],
            e1=(len(b) + 4, len(b) + 4 + len(a)),
            e2=(0, len(b)),
        ),
    ],
    "subsidiary_of": [
        lambda a, b, rng: _place(
            [*a, "operates", "as", "a", "subsidiary", "of", *b],
            e1=(0, len(a)),
            e2=(len(a) + 5, len(a) + 5 + len(b)),
        ),
        lambda a, b, rng: _place(
            [*a, "reports", "earnings", "through", "parent", *b],
            e1=(0, len(a)),
            e2=(len(a) + 4, len(a) + 4 + len(b)),
        ),
    ],
    "no_relation": [
        lambda a, b, rng: _place(
            [*a, "and", *b, "both", "declined", "to", "comment"],
            e1=(0, len(a)),
            e2=(len(a) + 1, len(a) + 1 + len(b)),
        ),
        lambda a, b, rng: _place(
            [*a, "presented", "after", *b, "at", "the", "conference"],
            e1=(0, len(a)),
            e2=(len(a) + 2, len(a) + 2 + len(b)),
        ),
    ],
}


def _place(tokens, e1, e2):
    return tokens, e1, e2


def make_instance(iid, pair, relation, rng, seen_sentences):
    while True:
        if pair == ("ORG", "PER"):
            org = rng.choice(ORGS)
            per = rng.choice(PEOPLE)
            template = rng.choice(ORG_PER_TEMPLATES[relation])
            tokens, e1, e2 = template(org, per, rng)
            e1_type, e2_type = "ORG", "PER"
        else:
            a = rng.choice(ORGS)
            b = rng.choice([o for o in ORGS if o != a])
            template = rng.choice(ORG_ORG_TEMPLATES[relation])
            tokens, e1, e2 = template(a, b, rng)
            e1_type, e2_type = "ORG", "ORG"
        sentence = " ".join(tokens)
        if sentence not in seen_sentences:
            seen_sentences.add(sentence)
            break
    assert tokens[e1[0] : e1[1]], (iid, tokens, e1)
    assert tokens[e2[0] : e2[1]], (iid, tokens, e2)
    return {
        "id": iid,
        "tokens": tokens,
        "e1_start": e1[0],
        "e1_end": e1[1],
        "e2_start": e2[0],
        "e2_end": e2[1],
        "e1_type": e1_type,
        "e2_type": e2_type,
        "relation": relation,
    }


def generate():
    rng = random.Random(SEED)
    seen = set()
    train = []
    pairs = (
        (("ORG", "PER"), ["employee_of", "founder_of", "no_relation"]),
        (("ORG", "ORG"), ["acquired_by", "subsidiary_of", "no_relation"]),
    )
    i = 0
    for pair, relations in pairs:
        for relation in relations:
            for _ in range(5):
                train.append(make_instance(f"tr{i:03d}", pair, relation, rng, seen))
                i += 1
    test = []
    test_plan = [
        (("ORG", "PER"), "employee_of", 2),
        (("ORG", "PER"), "founder_of", 2),
        (("ORG", "PER"), "no_relation", 1),
        (("ORG", "ORG"), "acquired_by", 2),
        (("ORG", "ORG"), "subsidiary_of", 2),
        (("ORG", "ORG"), "no_relation", 1),
    ]
    i = 0
    for pair, relation, count in test_plan:
        for _ in range(count):
            test.append(make_instance(f"te{i:03d}", pair, relation, rng, seen))
            i += 1
    return train, test


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as sink:
        for record in records:
            sink.write(json.dumps(record, sort_keys=True) + "\n")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--out-dir",
        default=str(Path(__file__).resolve().parent.parent / "tests" / "data"),
        help="directory for fixture_train.jsonl and fixture_test.jsonl",
    )
    args = parser.parse_args()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = generate()
    assert len(train) == 30 and len(test) == 10
    write_jsonl(out_dir / "fixture_train.jsonl", train)
    write_jsonl(out_dir / "fixture_test.jsonl", test)
    print(f"wrote {len(train)} train and {len(test)} test instances to {out_dir}")


if __name__ == "__main__":
    main()
