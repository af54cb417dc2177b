"""Prompt assembly and completion parsing for relation classification.

A prompt is built from a template with four placeholders: the task
description, the permissible classes for the test instance's entity-type
pair, a block of labelled demonstrations, and the unlabelled test input.
Demonstrations combine retrieved neighbours with per-class random examples.
"""

from __future__ import annotations

import hashlib
import logging
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

from icl_re.corpus import NO_RELATION, Corpus, REInstance, sample_by_relation

logger = logging.getLogger(__name__)

E1_OPEN, E1_CLOSE = "[E1]", "[/E1]"
E2_OPEN, E2_CLOSE = "[E2]", "[/E2]"

PLACEHOLDERS = ("task_description", "classes", "demos", "test_input")

DEFAULT_TASK_DESCRIPTION = (
    "Given a sentence with two marked entities, decide which relation holds "
    "between the first entity and the second entity."
)

_PREFIXES = ("the_relation_is", "relation", "answer")
_NO_RELATION_ALIASES = frozenset({"no_relation", "none"})
_PUNCTUATION = set(string.punctuation) - {"_"}


class PromptError(ValueError):
    """Invalid inputs while assembling a prompt."""


def render_instance(inst: REInstance, with_label: bool = True) -> str:
    """Render tokens with entity markers attached to the span boundaries.

    Tokens are joined by single spaces; markers are glued to their tokens.
    When spans share a boundary, openings are ordered [E1] then [E2] and
    closings [/E2] then [/E1], giving nested markers for identical spans.
    """
    e1, e2 = inst.e1_span, inst.e2_span
    parts: list[str] = []
    for position, token in enumerate(inst.tokens):
        prefix = ""
        if position == e1.start:
            prefix += E1_OPEN
        if position == e2.start:
            prefix += E2_OPEN
        suffix = ""
        if position == e2.end - 1:
            suffix += E2_CLOSE
        if position == e1.end - 1:
            suffix += E1_CLOSE
        parts.append(prefix + token + suffix)
    text = " ".join(parts)
    if with_label:
        text += f"\nRelation: {inst.relation}"
    return text


def embedding_text(inst: REInstance) -> str:
    """The unlabelled rendering used as the retrieval key for an instance."""
    return render_instance(inst, with_label=False)


@dataclass(frozen=True)
class PromptTemplate:
    """Template text plus a short content hash used to version prompts."""

    text: str
    version: str

    @classmethod
    def from_text(cls, text: str) -> "PromptTemplate":
        missing = [p for p in PLACEHOLDERS if f"{{{p}}}" not in text]
        if missing:
            raise PromptError(f"template is missing placeholders: {missing}")
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]
        return cls(text=text, version=digest)

    @classmethod
    def from_file(cls, path: str | Path) -> "PromptTemplate":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls) -> "PromptTemplate":
        text = (
            resources.files("icl_re").joinpath("templates/default.txt").read_text("utf-8")
        )
        return cls.from_text(text)


@dataclass(frozen=True)
class PromptBundle:
    """An assembled prompt plus everything needed to audit it."""

    text: str
    demo_ids: tuple[str, ...]
    permissible: tuple[str, ...]
    test_id: str
    template_version: str
    token_estimate: int


def estimate_tokens(text: str) -> int:
    """Crude length proxy: one token per four characters, rounded up."""
    return (len(text) + 3) // 4


def _render_demo(inst: REInstance) -> str:
    return render_instance(inst, with_label=True)


def build_prompt(
    test: REInstance,
    retrieved: Sequence[REInstance],
    corpus: Corpus,
    r_per_class: int,
    seed: int,
    template: PromptTemplate | None = None,
    task_description: str = DEFAULT_TASK_DESCRIPTION,
    order: str = "most_similar_last",
    token_budget: int = 0,
) -> PromptBundle:
    """Assemble the prompt for one test instance.

    `retrieved` must arrive most similar first (retriever output order) with
    labels permissible for the test pair. Each class in the pair's schema
    entry contributes up to r_per_class random demonstrations, sampled with
    a per-class seed so classes never perturb each other. A non-zero
    token_budget drops random demonstrations round-robin across classes,
    then retrieved ones least-similar first, until the estimate fits.
    """
    if template is None:
        template = PromptTemplate.default()
    if order not in ("most_similar_last", "most_similar_first"):
        raise PromptError(f"unknown demonstration order {order!r}")
    if r_per_class < 0:
        raise PromptError(f"r_per_class must be >= 0, got {r_per_class}")

    permissible = corpus.schema.permissible_relations(*test.type_pair)

    seen_ids: set[str] = set()
    for demo in retrieved:
        if demo.id == test.id:
            raise PromptError(f"test instance {test.id!r} appears among demonstrations")
        if demo.id in seen_ids:
            raise PromptError(f"duplicate demonstration id {demo.id!r}")
        seen_ids.add(demo.id)
        if demo.relation not in permissible:
            raise PromptError(
                f"demonstration {demo.id!r} has label {demo.relation!r}, not "
                f"permissible for pair {test.type_pair}"
            )

    if order == "most_similar_last":
        retrieved_block = list(reversed(retrieved))
    else:
        retrieved_block = list(retrieved)

    exclude = frozenset({test.id} | seen_ids)
    random_by_class: dict[str, list[REInstance]] = {}
    for relation in permissible:
        random_by_class[relation] = sample_by_relation(
            corpus, test.type_pair, relation, r_per_class, seed, exclude=exclude
        )

    def assemble() -> tuple[str, tuple[str, ...]]:
        demos: list[REInstance] = []
        for relation in permissible:
            demos.extend(random_by_class[relation])
        demos.extend(retrieved_block)
        demo_text = "\n\n".join(_render_demo(d) for d in demos)
        text = template.text.format(
            task_description=task_description,
            classes=", ".join(permissible),
            demos=demo_text,
            test_input=render_instance(test, with_label=False),
        )
        return text, tuple(d.id for d in demos)

    text, demo_ids = assemble()
    if token_budget > 0:
        while estimate_tokens(text) > token_budget:
            dropped = False
            for relation in permissible:
                if random_by_class[relation]:
                    victim = random_by_class[relation].pop()
                    logger.warning(
                        "prompt for %s over budget, dropping random demo %s (%s)",
                        test.id,
                        victim.id,
                        relation,
                    )
                    dropped = True
                    break
            if not dropped and retrieved_block:
                if order == "most_similar_last":
                    victim = retrieved_block.pop(0)
                else:
                    victim = retrieved_block.pop()
                logger.warning(
                    "prompt for %s over budget, dropping retrieved demo %s",
                    test.id,
                    victim.id,
                )
                dropped = True
            if not dropped:
                logger.warning(
                    "prompt for %s exceeds token budget %d with no demonstrations left",
                    test.id,
                    token_budget,
                )
                break
            text, demo_ids = assemble()

    return PromptBundle(
        text=text,
        demo_ids=demo_ids,
        permissible=tuple(permissible),
        test_id=test.id,
        template_version=template.version,
        token_estimate=estimate_tokens(text),
    )


def _normalize(text: str) -> str:
    out = text.strip().lower()
    while len(out) >= 2 and out[0] == out[-1] and out[0] in ("'", '"', "`"):
        out = out[1:-1].strip()
    cleaned = "".join(" " if ch in _PUNCTUATION else ch for ch in out)
    return "_".join(cleaned.split())


def _strip_prefixes(norm: str) -> str:
    prefixes = sorted(_PREFIXES, key=len, reverse=True)
    changed = True
    while changed:
        changed = False
        for prefix in prefixes:
            marker = prefix + "_"
            if norm.startswith(marker) and len(norm) > len(marker):
                norm = norm[len(marker):]
                changed = True
    return norm


def parse_relation(completion: str, permissible: Sequence[str]) -> tuple[str, str]:
    """Map a raw completion to a permissible label.

    Returns (label, status) where status is "exact" for verbatim matches
    (underscores may be spaces), "normalized" when case folding, punctuation
    stripping, or a leading cue word had to be removed, and "fallback" when
    nothing matches, in which case the label is no_relation.
    """
    if NO_RELATION not in permissible:
        raise ValueError("permissible labels must include no_relation")
    trimmed = completion.strip()
    for label in permissible:
        if trimmed == label or trimmed == label.replace("_", " "):
            return label, "exact"

    lookup: dict[str, str] = {}
    for label in permissible:
        lookup.setdefault(_normalize(label), label)

    norm = _normalize(trimmed)
    for candidate in (norm, _strip_prefixes(norm)):
        if candidate in lookup:
            return lookup[candidate], "normalized"
        if candidate in _NO_RELATION_ALIASES:
            return NO_RELATION, "normalized"
    return NO_RELATION, "fallback"
