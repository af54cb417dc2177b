#!/usr/bin/env python3
"""Recount a run's metrics straight from records.jsonl.

A naive, loop-based recount with no package imports, printed as JSON. When
the run directory holds a report.json the recount is compared against it
and any disagreement makes the script exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

NO_RELATION = "no_relation"
TOLERANCE = 1e-9


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
    per_class = {}
    macro_terms = []
    for label in labels:
        tp = sum(1 for r in records if r["gold"] == label and r["predicted"] == label)
        fp = sum(1 for r in records if r["gold"] != label and r["predicted"] == label)
        fn = sum(1 for r in records if r["gold"] == label and r["predicted"] != label)
        support = tp + fn
        class_p = tp / (tp + fp) if tp + fp > 0 else 0.0
        class_r = tp / support if support > 0 else 0.0
        score = f1(class_p, class_r)
        per_class[label] = {
            "precision": class_p,
            "recall": class_r,
            "f1": score,
            "support": support,
        }
        if support > 0:
            macro_terms.append(score)

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
        "per_class": per_class,
    }


def compare(computed: dict, report: dict) -> list[str]:
    problems = []
    for key in (
        "micro_f1_excl_norel",
        "micro_f1_incl_norel",
        "macro_f1",
        "fallback_rate",
    ):
        if abs(computed[key] - report[key]) > TOLERANCE:
            problems.append(f"{key}: recount {computed[key]} vs report {report[key]}")
    if computed["n_records"] != report["n_records"]:
        problems.append(
            f"n_records: recount {computed['n_records']} vs report "
            f"{report['n_records']}"
        )
    for label, scores in computed["per_class"].items():
        recorded = report.get("per_class", {}).get(label)
        if recorded is None:
            problems.append(f"per_class {label}: missing from report")
            continue
        for field in ("precision", "recall", "f1"):
            if abs(scores[field] - recorded[field]) > TOLERANCE:
                problems.append(
                    f"per_class {label} {field}: recount {scores[field]} vs "
                    f"report {recorded[field]}"
                )
        if scores["support"] != recorded["support"]:
            problems.append(f"per_class {label} support differs")
    return problems


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("run_dir", help="run directory holding records.jsonl")
    args = parser.parse_args()
    run_dir = Path(args.run_dir)

    records = [
        json.loads(line)
        for line in (run_dir / "records.jsonl").read_text(encoding="utf-8").splitlines()
        if line
    ]
    if not records:
        print("no records to count", file=sys.stderr)
        return 1
    computed = recount(records)
    print(json.dumps(computed, sort_keys=True, indent=2))

    report_path = run_dir / "report.json"
    if report_path.exists():
        report = json.loads(report_path.read_text(encoding="utf-8"))
        problems = compare(computed, report)
        if problems:
            for problem in problems:
                print(f"MISMATCH {problem}", file=sys.stderr)
            return 1
        print("recount matches report.json", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
