#!/usr/bin/env python3
"""Replay a majority-mock run from its artifacts alone.

Reads records.jsonl plus the dumped prompts of a finished run, recomputes
every prediction with an independent majority rule, recomputes the headline
metrics with an independent count, and compares both against what the run
recorded. Exits nonzero on any mismatch.

The run must have been produced with prompt.dump_prompts = true and the
majority completion mock. Deliberately imports nothing from the package,
so it cannot inherit its bugs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

NO_RELATION = "no_relation"
TOLERANCE = 1e-9


def majority_from_prompt(prompt: str) -> str:
    classes = []
    labels = []
    for line in prompt.splitlines():
        if line.startswith("Possible relations: "):
            listed = line[len("Possible relations: ") :]
            classes = [c.strip() for c in listed.split(",")]
        elif line.startswith("Relation: "):
            label = line[len("Relation: ") :].strip()
            if label:
                labels.append(label)
    if not classes:
        raise SystemExit(f"prompt has no class listing:\n{prompt[:200]}")
    if not labels:
        return classes[0]
    counts = {}
    for label in labels:
        counts[label] = counts.get(label, 0) + 1
    best = None
    best_rank = None
    for label, count in counts.items():
        position = classes.index(label) if label in classes else len(classes)
        rank = (-count, position)
        if best_rank is None or rank < best_rank:
            best_rank = rank
            best = label
    return best


def f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def recount(records: list[dict]) -> dict:
    n = len(records)
    guessed = sum(1 for r in records if r["predicted"] != NO_RELATION)
    actual = sum(1 for r in records if r["gold"] != NO_RELATION)
    correct = sum(
        1
        for r in records
        if r["predicted"] != NO_RELATION and r["predicted"] == r["gold"]
    )
    precision = correct / guessed if guessed > 0 else 1.0
    recall = correct / actual if actual > 0 else 0.0

    labels = sorted({r["gold"] for r in records} | {r["predicted"] for r in records})
    macro_terms = []
    for label in labels:
        tp = sum(1 for r in records if r["gold"] == label and r["predicted"] == label)
        fp = sum(1 for r in records if r["gold"] != label and r["predicted"] == label)
        fn = sum(1 for r in records if r["gold"] == label and r["predicted"] != label)
        support = tp + fn
        if support == 0:
            continue
        class_p = tp / (tp + fp) if tp + fp > 0 else 0.0
        class_r = tp / support
        macro_terms.append(f1(class_p, class_r))

    return {
        "micro_f1_excl_norel": f1(precision, recall),
        "micro_f1_incl_norel": sum(
            1 for r in records if r["gold"] == r["predicted"]
        )
        / n,
        "macro_f1": sum(macro_terms) / len(macro_terms) if macro_terms else 0.0,
        "fallback_rate": sum(1 for r in records if r["parse_status"] == "fallback")
        / n,
        "n_records": n,
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("run_dir", help="finished run directory with prompts/")
    args = parser.parse_args()
    run_dir = Path(args.run_dir)

    records = [
        json.loads(line)
        for line in (run_dir / "records.jsonl").read_text(encoding="utf-8").splitlines()
        if line
    ]
    if not records:
        print("replay: no records", file=sys.stderr)
        return 1

    mismatches = 0
    for record in records:
        prompt_path = run_dir / "prompts" / f"{record['test_id']}.txt"
        if not prompt_path.exists():
            print(f"replay: missing prompt dump {prompt_path}", file=sys.stderr)
            return 1
        expected = majority_from_prompt(prompt_path.read_text(encoding="utf-8"))
        if expected != record["predicted"]:
            mismatches += 1
            print(
                f"replay: {record['test_id']} predicted {record['predicted']!r}, "
                f"replay says {expected!r}",
                file=sys.stderr,
            )
    if mismatches:
        print(f"replay: {mismatches} prediction mismatches", file=sys.stderr)
        return 1

    computed = recount(records)
    report = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    for key, value in computed.items():
        recorded = report[key]
        if key == "n_records":
            ok = recorded == value
        else:
            ok = abs(recorded - value) <= TOLERANCE
        if not ok:
            print(
                f"replay: {key} mismatch, report has {recorded}, recount has {value}",
                file=sys.stderr,
            )
            return 1

    print(
        f"replay: {len(records)} predictions and "
        f"{len(computed) - 1} metrics verified"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
