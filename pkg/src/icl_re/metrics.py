"""Scoring predicted relation labels against gold labels.

Three aggregate F1 variants are computed side by side:

- micro_f1_excl_norel: micro-averaged over non-abstention predictions only.
  Precision counts correct non-no_relation predictions over all
  non-no_relation predictions (defined as 1.0 when nothing was predicted),
  recall counts them over all non-no_relation gold labels (0.0 when there
  are none). This is the headline number for relation extraction.
- micro_f1_incl_norel: micro over all classes, which equals plain accuracy.
- macro_f1: unweighted mean of per-class F1 over classes with gold support,
  no_relation included.

Per-class precision and recall use the 0.0 convention for empty denominators.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from icl_re.corpus import NO_RELATION, RelationSchema

REPORT_VERSION = 1


class EmptyTestSet(ValueError):
    """No prediction records to score."""


class SplitMismatch(ValueError):
    """Two runs cover different test instances and cannot be compared."""


@dataclass(frozen=True)
class ClassScore:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    micro_f1_excl_norel: float
    micro_f1_incl_norel: float
    macro_f1: float
    per_class: dict[str, ClassScore]
    fallback_rate: float
    n_records: int
    split_digest: str
    config: dict | None = None
    report_version: int = REPORT_VERSION

    def to_dict(self) -> dict:
        return {
            "report_version": self.report_version,
            "n_records": self.n_records,
            "split_digest": self.split_digest,
            "micro_f1_excl_norel": self.micro_f1_excl_norel,
            "micro_f1_incl_norel": self.micro_f1_incl_norel,
            "macro_f1": self.macro_f1,
            "fallback_rate": self.fallback_rate,
            "per_class": {
                label: {
                    "precision": score.precision,
                    "recall": score.recall,
                    "f1": score.f1,
                    "support": score.support,
                }
                for label, score in sorted(self.per_class.items())
            },
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "MetricsReport":
        if raw.get("report_version") != REPORT_VERSION:
            raise ValueError(
                f"unsupported report version {raw.get('report_version')!r}"
            )
        per_class = {
            label: ClassScore(
                precision=entry["precision"],
                recall=entry["recall"],
                f1=entry["f1"],
                support=entry["support"],
            )
            for label, entry in raw["per_class"].items()
        }
        return cls(
            micro_f1_excl_norel=raw["micro_f1_excl_norel"],
            micro_f1_incl_norel=raw["micro_f1_incl_norel"],
            macro_f1=raw["macro_f1"],
            per_class=per_class,
            fallback_rate=raw["fallback_rate"],
            n_records=raw["n_records"],
            split_digest=raw["split_digest"],
            config=raw.get("config"),
        )


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def split_digest(pairs: Sequence[tuple[str, str]]) -> str:
    """Stable digest of the evaluated (test_id, gold) set, order-independent."""
    material = json.dumps(sorted(pairs), separators=(",", ":"))
    return hashlib.sha256(material.encode("utf-8")).hexdigest()[:16]


def compute_metrics(
    records: Sequence,
    schema: RelationSchema | None = None,
    config: dict | None = None,
) -> MetricsReport:
    """Score prediction records (anything with test_id, gold, predicted,
    parse_status attributes).

    With a schema, every gold and predicted label must belong to it.
    """
    if not records:
        raise EmptyTestSet("cannot compute metrics for zero records")

    if schema is not None:
        known = schema.all_relations | {NO_RELATION}
        for record in records:
            for kind, label in (("gold", record.gold), ("predicted", record.predicted)):
                if label not in known:
                    raise ValueError(
                        f"record {record.test_id!r} has {kind} label {label!r} "
                        f"outside the schema"
                    )

    n = len(records)
    guessed = sum(1 for r in records if r.predicted != NO_RELATION)
    actual = sum(1 for r in records if r.gold != NO_RELATION)
    correct = sum(
        1 for r in records if r.predicted != NO_RELATION and r.predicted == r.gold
    )
    micro_precision = correct / guessed if guessed > 0 else 1.0
    micro_recall = correct / actual if actual > 0 else 0.0
    micro_excl = _f1(micro_precision, micro_recall)

    micro_incl = sum(1 for r in records if r.predicted == r.gold) / n

    labels = sorted({r.gold for r in records} | {r.predicted for r in records})
    per_class: dict[str, ClassScore] = {}
    for label in labels:
        tp = sum(1 for r in records if r.gold == label and r.predicted == label)
        fp = sum(1 for r in records if r.gold != label and r.predicted == label)
        fn = sum(1 for r in records if r.gold == label and r.predicted != label)
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        support = sum(1 for r in records if r.gold == label)
        per_class[label] = ClassScore(precision, recall, _f1(precision, recall), support)

    supported = [s.f1 for s in per_class.values() if s.support > 0]
    macro = sum(supported) / len(supported) if supported else 0.0

    fallback = sum(1 for r in records if r.parse_status == "fallback") / n

    return MetricsReport(
        micro_f1_excl_norel=micro_excl,
        micro_f1_incl_norel=micro_incl,
        macro_f1=macro,
        per_class=per_class,
        fallback_rate=fallback,
        n_records=n,
        split_digest=split_digest([(r.test_id, r.gold) for r in records]),
        config=config,
    )


def compare_runs(baseline: MetricsReport, other: MetricsReport) -> dict:
    """Per-metric deltas (other minus baseline) for two runs of one test set.

    Raises SplitMismatch when the runs scored different (test_id, gold)
    sets. Classes missing from one run contribute zeros on that side.
    """
    if baseline.split_digest != other.split_digest:
        raise SplitMismatch(
            f"runs cover different test sets: {baseline.split_digest} "
            f"vs {other.split_digest}"
        )
    zero = ClassScore(0.0, 0.0, 0.0, 0)
    classes = sorted(set(baseline.per_class) | set(other.per_class))
    per_class = {}
    for label in classes:
        a = baseline.per_class.get(label, zero)
        b = other.per_class.get(label, zero)
        per_class[label] = {
            "f1_baseline": a.f1,
            "f1_other": b.f1,
            "f1_delta": b.f1 - a.f1,
            "support": max(a.support, b.support),
        }
    return {
        "split_digest": baseline.split_digest,
        "micro_f1_excl_norel": {
            "baseline": baseline.micro_f1_excl_norel,
            "other": other.micro_f1_excl_norel,
            "delta": other.micro_f1_excl_norel - baseline.micro_f1_excl_norel,
        },
        "micro_f1_incl_norel": {
            "baseline": baseline.micro_f1_incl_norel,
            "other": other.micro_f1_incl_norel,
            "delta": other.micro_f1_incl_norel - baseline.micro_f1_incl_norel,
        },
        "macro_f1": {
            "baseline": baseline.macro_f1,
            "other": other.macro_f1,
            "delta": other.macro_f1 - baseline.macro_f1,
        },
        "fallback_rate": {
            "baseline": baseline.fallback_rate,
            "other": other.fallback_rate,
            "delta": other.fallback_rate - baseline.fallback_rate,
        },
        "per_class": per_class,
    }
