"""Corpus loading, relation schema derivation, and keyed demonstration sampling.

Instances are tokenized sentences with two marked argument spans and a gold
relation label. The permissible relation labels for an instance are determined
by its (e1_type, e2_type) entity-type pair through a RelationSchema.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

NO_RELATION = "no_relation"

VALID_SPLITS = ("train", "test")

CANONICAL_FIELDS = (
    "id",
    "tokens",
    "e1_start",
    "e1_end",
    "e2_start",
    "e2_end",
    "e1_type",
    "e2_type",
    "relation",
)

# TACRED-style source fields with inclusive end indices.
DEFAULT_NATIVE_FIELD_MAP = {
    "id": "id",
    "tokens": "token",
    "e1_start": "subj_start",
    "e1_end": "subj_end",
    "e1_type": "subj_type",
    "e2_start": "obj_start",
    "e2_end": "obj_end",
    "e2_type": "obj_type",
    "relation": "relation",
}


class CorpusError(ValueError):
    """Malformed corpus file or invalid instance data."""


class UnknownTypePair(KeyError):
    """Schema lookup for an entity-type pair that has no entry."""

    def __str__(self) -> str:  # KeyError repr-quotes its message otherwise
        return self.args[0] if self.args else ""


@dataclass(frozen=True)
class Span:
    """Token span, end exclusive, tagged with its entity type."""

    start: int
    end: int
    entity_type: str


@dataclass(frozen=True)
class REInstance:
    """One relation-extraction instance: tokens, two argument spans, gold label."""

    id: str
    tokens: tuple[str, ...]
    e1_span: Span
    e2_span: Span
    relation: str
    split: str = "train"

    @property
    def type_pair(self) -> tuple[str, str]:
        return (self.e1_span.entity_type, self.e2_span.entity_type)

    def validate(self) -> None:
        """Raise CorpusError unless spans, label, and split are well formed."""
        if not self.id:
            raise CorpusError("instance id must be a non-empty string")
        if not self.tokens:
            raise CorpusError(f"instance {self.id!r}: tokens must be non-empty")
        for name, span in (("e1", self.e1_span), ("e2", self.e2_span)):
            if not (0 <= span.start < span.end <= len(self.tokens)):
                raise CorpusError(
                    f"instance {self.id!r}: {name} span [{span.start}, {span.end}) "
                    f"out of bounds for {len(self.tokens)} tokens"
                )
            if not span.entity_type:
                raise CorpusError(f"instance {self.id!r}: {name} entity type is empty")
        if not self.relation:
            raise CorpusError(f"instance {self.id!r}: relation label is empty")
        if self.split not in VALID_SPLITS:
            raise CorpusError(
                f"instance {self.id!r}: split {self.split!r} not in {VALID_SPLITS}"
            )


@dataclass(frozen=True)
class RelationSchema:
    """Maps each entity-type pair to its permissible relation labels.

    Labels for a pair are stored sorted, which fixes the deterministic
    "schema order" used for prompt class listings and tie-breaking. Every
    entry contains NO_RELATION.
    """

    entries: Mapping[tuple[str, str], tuple[str, ...]]

    def __post_init__(self) -> None:
        for pair, labels in self.entries.items():
            if NO_RELATION not in labels:
                raise CorpusError(
                    f"schema entry for {pair} must include {NO_RELATION!r}"
                )
            if tuple(sorted(labels)) != tuple(labels):
                raise CorpusError(f"schema entry for {pair} must be sorted")

    @property
    def type_pairs(self) -> tuple[tuple[str, str], ...]:
        return tuple(sorted(self.entries))

    @property
    def all_relations(self) -> frozenset[str]:
        out: set[str] = set()
        for labels in self.entries.values():
            out.update(labels)
        return frozenset(out)

    def permissible_relations(self, e1_type: str, e2_type: str) -> tuple[str, ...]:
        """Permissible labels for (e1_type, e2_type), in schema order."""
        pair = (e1_type, e2_type)
        if pair not in self.entries:
            raise UnknownTypePair(f"no schema entry for entity-type pair {pair}")
        return self.entries[pair]


def derive_schema(
    instances: Iterable[REInstance],
    override: Mapping[tuple[str, str], Sequence[str]] | None = None,
) -> RelationSchema:
    """Build a RelationSchema from observed (type pair, relation) combinations.

    With an override, the override's entries are used instead, but every
    observed combination must still be covered by it.
    """
    observed: dict[tuple[str, str], set[str]] = {}
    for inst in instances:
        observed.setdefault(inst.type_pair, set()).add(inst.relation)

    if override is None:
        entries = {
            pair: tuple(sorted(labels | {NO_RELATION}))
            for pair, labels in observed.items()
        }
        return RelationSchema(entries)

    entries = {
        pair: tuple(sorted(set(labels) | {NO_RELATION}))
        for pair, labels in override.items()
    }
    for pair, labels in observed.items():
        if pair not in entries:
            raise CorpusError(f"schema override is missing entity-type pair {pair}")
        missing = labels - set(entries[pair])
        if missing:
            raise CorpusError(
                f"schema override for {pair} is missing observed relations "
                f"{sorted(missing)}"
            )
    return RelationSchema(entries)


def load_schema_override(path: str | Path) -> dict[tuple[str, str], tuple[str, ...]]:
    """Read a schema override file: JSON object mapping "T1|T2" to label lists."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise CorpusError(f"{path}: schema override must be a JSON object")
    out: dict[tuple[str, str], tuple[str, ...]] = {}
    for key, labels in raw.items():
        parts = key.split("|")
        if len(parts) != 2 or not all(parts):
            raise CorpusError(
                f"{path}: schema override key {key!r} must look like 'T1|T2'"
            )
        if not isinstance(labels, list) or not all(
            isinstance(lbl, str) and lbl for lbl in labels
        ):
            raise CorpusError(
                f"{path}: schema override entry {key!r} must list non-empty strings"
            )
        out[(parts[0], parts[1])] = tuple(labels)
    return out


@dataclass(frozen=True)
class Corpus:
    """Validated instances plus the schema and lookup indexes derived from them.

    by_type_pair and by_relation hold instance ids in corpus order, so every
    downstream iteration over them is deterministic.
    """

    instances: tuple[REInstance, ...]
    schema: RelationSchema
    by_type_pair: Mapping[tuple[str, str], tuple[str, ...]]
    by_relation: Mapping[tuple[tuple[str, str], str], tuple[str, ...]]
    _by_id: Mapping[str, REInstance] = field(repr=False)

    def __len__(self) -> int:
        return len(self.instances)

    def __contains__(self, instance_id: str) -> bool:
        return instance_id in self._by_id

    def get(self, instance_id: str) -> REInstance:
        if instance_id not in self._by_id:
            raise KeyError(f"no instance with id {instance_id!r}")
        return self._by_id[instance_id]

    def split_instances(self, split: str) -> tuple[REInstance, ...]:
        return tuple(inst for inst in self.instances if inst.split == split)


def build_corpus(
    instances: Sequence[REInstance],
    schema_override: Mapping[tuple[str, str], Sequence[str]] | None = None,
) -> Corpus:
    """Validate instances, derive the schema, and build lookup indexes.

    Raises CorpusError on any invalid instance or duplicate id.
    """
    seen: dict[str, REInstance] = {}
    for inst in instances:
        inst.validate()
        if inst.id in seen:
            raise CorpusError(f"duplicate instance id {inst.id!r}")
        seen[inst.id] = inst

    schema = derive_schema(instances, override=schema_override)

    by_pair: dict[tuple[str, str], list[str]] = {}
    by_rel: dict[tuple[tuple[str, str], str], list[str]] = {}
    for inst in instances:
        by_pair.setdefault(inst.type_pair, []).append(inst.id)
        by_rel.setdefault((inst.type_pair, inst.relation), []).append(inst.id)

    return Corpus(
        instances=tuple(instances),
        schema=schema,
        by_type_pair={k: tuple(v) for k, v in by_pair.items()},
        by_relation={k: tuple(v) for k, v in by_rel.items()},
        _by_id=seen,
    )


def merge_corpora(*corpora: Corpus) -> Corpus:
    """Combine corpora into one, revalidating ids and rederiving the schema."""
    combined: list[REInstance] = []
    for corpus in corpora:
        combined.extend(corpus.instances)
    return build_corpus(combined)


def _require(record: dict, source_field: str, path: str, lineno: int):
    if source_field not in record:
        raise CorpusError(f"{path}:{lineno}: missing field {source_field!r}")
    return record[source_field]


def _parse_record(
    record: dict,
    path: str,
    lineno: int,
    split: str,
    field_map: Mapping[str, str],
    inclusive_ends: bool,
    strict_fields: bool,
) -> REInstance:
    if strict_fields:
        extra = set(record) - set(field_map.values())
        if extra:
            raise CorpusError(
                f"{path}:{lineno}: unexpected field {sorted(extra)[0]!r}"
            )

    raw_id = _require(record, field_map["id"], path, lineno)
    if not isinstance(raw_id, str) or not raw_id:
        raise CorpusError(
            f"{path}:{lineno}: field {field_map['id']!r} must be a non-empty string"
        )

    tokens = _require(record, field_map["tokens"], path, lineno)
    if not isinstance(tokens, list) or not tokens or not all(
        isinstance(tok, str) for tok in tokens
    ):
        raise CorpusError(
            f"{path}:{lineno}: field {field_map['tokens']!r} must be a non-empty "
            f"array of strings"
        )

    bounds: dict[str, int] = {}
    for name in ("e1_start", "e1_end", "e2_start", "e2_end"):
        value = _require(record, field_map[name], path, lineno)
        if not isinstance(value, int) or isinstance(value, bool):
            raise CorpusError(
                f"{path}:{lineno}: field {field_map[name]!r} must be an integer"
            )
        bounds[name] = value

    strings: dict[str, str] = {}
    for name in ("e1_type", "e2_type", "relation"):
        value = _require(record, field_map[name], path, lineno)
        if not isinstance(value, str) or not value:
            raise CorpusError(
                f"{path}:{lineno}: field {field_map[name]!r} must be a non-empty string"
            )
        strings[name] = value

    shift = 1 if inclusive_ends else 0
    inst = REInstance(
        id=raw_id,
        tokens=tuple(tokens),
        e1_span=Span(bounds["e1_start"], bounds["e1_end"] + shift, strings["e1_type"]),
        e2_span=Span(bounds["e2_start"], bounds["e2_end"] + shift, strings["e2_type"]),
        relation=strings["relation"],
        split=split,
    )
    try:
        inst.validate()
    except CorpusError as exc:
        raise CorpusError(f"{path}:{lineno}: {exc}") from exc
    return inst


def load_instances(
    path: str | Path,
    fmt: str = "canonical",
    split: str = "train",
    field_map: Mapping[str, str] | None = None,
    inclusive_ends: bool | None = None,
) -> list[REInstance]:
    """Parse one JSONL corpus file into instances assigned to `split`.

    Args:
        path: JSONL file, one instance object per line.
        fmt: "canonical" (fixed field names, exclusive span ends) or
            "refind_native" (field names resolved through `field_map`,
            inclusive span ends by default).
        split: split label stamped on every instance from this file.
        field_map: canonical-name to source-field-name mapping; only
            consulted for fmt="refind_native".
        inclusive_ends: span end convention override; None picks the
            format's default.
    """
    if split not in VALID_SPLITS:
        raise CorpusError(f"split must be one of {VALID_SPLITS}, got {split!r}")
    if fmt == "canonical":
        effective_map = {name: name for name in CANONICAL_FIELDS}
        effective_inclusive = False if inclusive_ends is None else inclusive_ends
        strict = True
    elif fmt == "refind_native":
        effective_map = dict(DEFAULT_NATIVE_FIELD_MAP)
        if field_map:
            unknown = set(field_map) - set(CANONICAL_FIELDS)
            if unknown:
                raise CorpusError(
                    f"field map names unknown canonical fields: {sorted(unknown)}"
                )
            effective_map.update(field_map)
        effective_inclusive = True if inclusive_ends is None else inclusive_ends
        strict = False
    else:
        raise CorpusError(f"unknown corpus format {fmt!r}")

    path_str = str(path)
    instances: list[REInstance] = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path_str}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise CorpusError(f"{path_str}:{lineno}: record must be a JSON object")
            instances.append(
                _parse_record(
                    record,
                    path_str,
                    lineno,
                    split,
                    effective_map,
                    effective_inclusive,
                    strict,
                )
            )
    return instances


def load_corpus(
    path: str | Path,
    fmt: str = "canonical",
    split: str = "train",
    field_map: Mapping[str, str] | None = None,
    inclusive_ends: bool | None = None,
    schema_override: Mapping[tuple[str, str], Sequence[str]] | None = None,
) -> Corpus:
    """Load one file and build a corpus from it. See load_instances."""
    instances = load_instances(
        path,
        fmt=fmt,
        split=split,
        field_map=field_map,
        inclusive_ends=inclusive_ends,
    )
    return build_corpus(instances, schema_override=schema_override)


def _keyed_rng(seed: int, type_pair: tuple[str, str], relation: str) -> random.Random:
    key = f"{seed}|{type_pair[0]}|{type_pair[1]}|{relation}"
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def sample_by_relation(
    corpus: Corpus,
    type_pair: tuple[str, str],
    relation: str,
    n: int,
    seed: int,
    exclude: frozenset[str] | set[str] = frozenset(),
    split: str = "train",
) -> list[REInstance]:
    """Sample up to n distinct instances of (type_pair, relation) from a split.

    The RNG is seeded from (seed, type_pair, relation), so the draw for one
    relation class never depends on which other classes are being sampled.
    Returns min(n, available) instances; ids in `exclude` are never returned.
    """
    if n < 0:
        raise ValueError(f"sample size must be >= 0, got {n}")
    ids = corpus.by_relation.get((type_pair, relation), ())
    candidates = [
        iid for iid in ids if iid not in exclude and corpus.get(iid).split == split
    ]
    rng = _keyed_rng(seed, type_pair, relation)
    chosen = rng.sample(candidates, min(n, len(candidates)))
    return [corpus.get(iid) for iid in chosen]
