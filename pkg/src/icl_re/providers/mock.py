"""Deterministic in-process provider backends.

These stand in for real embedding, completion, and scoring services so the
whole pipeline can run offline and reproducibly. Every response includes
"mock": true so downstream code can tell synthetic results from real ones.
"""

from __future__ import annotations

import hashlib
import re
import threading
from typing import Mapping, Sequence

from icl_re.providers.base import TransportError

_RELATION_LINE = re.compile(r"^Relation: (.+)$", re.MULTILINE)
_CLASS_LINE = re.compile(r"^Possible relations: (.+)$", re.MULTILINE)


class CountingTransport:
    """Base class tracking how many requests actually reached the backend."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.calls = 0

    def _count(self) -> None:
        with self._lock:
            self.calls += 1


class HashEmbeddingTransport(CountingTransport):
    """Text-keyed pseudo-random unit vectors.

    Values are expanded from sha256(seed | block | text) in counter mode and
    the vector is L2-normalized, so embeddings are a pure function of
    (text, seed, dim) and distinct texts give distinct directions.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        super().__init__()
        if dim < 1:
            raise ValueError("embedding dim must be >= 1")
        self.dim = dim
        self.seed = seed

    def _expand(self, text: str) -> list[float]:
        values: list[float] = []
        block = 0
        while len(values) < self.dim:
            digest = hashlib.sha256(
                f"{self.seed}|{block}|{text}".encode("utf-8")
            ).digest()
            for offset in range(0, 32, 8):
                raw = int.from_bytes(digest[offset : offset + 8], "big")
                values.append(raw / 2**64 * 2.0 - 1.0)
            block += 1
        return values[: self.dim]

    def send(self, body: dict) -> dict:
        self._count()
        (text,) = body["input"]
        values = self._expand(text)
        norm = sum(v * v for v in values) ** 0.5
        if norm == 0.0:
            raise TransportError("degenerate zero embedding", retryable=False)
        return {
            "data": [{"embedding": [v / norm for v in values]}],
            "mock": True,
        }


class ScriptedCompletionTransport(CountingTransport):
    """Returns a scripted completion per exact prompt, or a default."""

    def __init__(self, responses: Mapping[str, str] | None = None, default: str = ""):
        super().__init__()
        self.responses = dict(responses or {})
        self.default = default

    def send(self, body: dict) -> dict:
        self._count()
        return {"text": self.responses.get(body["prompt"], self.default), "mock": True}


class GoldLeakCompletionTransport(CountingTransport):
    """Answers with the gold label of whichever test input the prompt ends with.

    Built from a mapping of rendered test inputs to their gold labels. The
    prompt's final block is the test input, so the answer key that ends
    latest in the prompt identifies the instance being asked about.
    """

    def __init__(self, answers: Mapping[str, str], default: str = "no relation"):
        super().__init__()
        self.answers = dict(answers)
        self.default = default

    def send(self, body: dict) -> dict:
        self._count()
        prompt = body["prompt"]
        best_key = None
        best_rank = (-1, -1)
        for key in self.answers:
            pos = prompt.rfind(key)
            if pos < 0:
                continue
            rank = (pos + len(key), len(key))
            if rank > best_rank:
                best_rank = rank
                best_key = key
        text = self.answers[best_key] if best_key is not None else self.default
        return {"text": text, "mock": True}


class MajorityDemoCompletionTransport(CountingTransport):
    """Predicts the most frequent demonstration label in the prompt.

    Reads only the prompt text: demonstration labels come from "Relation: X"
    lines, and ties are broken by position in the prompt's own
    "Possible relations:" listing. With no demonstrations it falls back to
    the first listed class.
    """

    def __init__(self) -> None:
        super().__init__()

    def send(self, body: dict) -> dict:
        self._count()
        prompt = body["prompt"]
        class_lines = _CLASS_LINE.findall(prompt)
        if not class_lines:
            raise TransportError(
                "prompt lists no classes; majority mock needs the class line",
                retryable=False,
            )
        class_order = [c.strip() for c in class_lines[-1].split(",")]
        labels = [m.strip() for m in _RELATION_LINE.findall(prompt)]
        if not labels:
            return {"text": class_order[0], "mock": True}
        counts: dict[str, int] = {}
        for label in labels:
            counts[label] = counts.get(label, 0) + 1

        def rank(label: str) -> tuple[int, int]:
            position = class_order.index(label) if label in class_order else len(class_order)
            return (-counts[label], position)

        winner = min(counts, key=rank)
        return {"text": winner, "mock": True}


class EditDistanceScoringTransport(CountingTransport):
    """Scores a target as minus its edit distance to the last demo label.

    The scoring prefix ends with one labelled demonstration followed by the
    unlabelled query input, so the last "Relation: X" line is the
    demonstration's label. A target identical to it scores 0, anything else
    scores more negatively the further away it is.
    """

    def __init__(self) -> None:
        super().__init__()

    @staticmethod
    def _edit_distance(a: str, b: str) -> int:
        previous = list(range(len(b) + 1))
        for i, ch_a in enumerate(a, start=1):
            current = [i]
            for j, ch_b in enumerate(b, start=1):
                cost = 0 if ch_a == ch_b else 1
                current.append(
                    min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + cost)
                )
            previous = current
        return previous[len(b)]

    def send(self, body: dict) -> dict:
        self._count()
        labels = _RELATION_LINE.findall(body["prompt"])
        if not labels:
            raise TransportError(
                "scoring prefix contains no labelled demonstration",
                retryable=False,
            )
        distance = self._edit_distance(body["echo_target"], labels[-1].strip())
        return {"logprobs": [-float(distance)], "mock": True}


class StaticScoringTransport(CountingTransport):
    """Returns one fixed logprob list regardless of input."""

    def __init__(self, logprobs: Sequence[float]):
        super().__init__()
        self.logprobs = list(logprobs)

    def send(self, body: dict) -> dict:
        self._count()
        return {"logprobs": list(self.logprobs), "mock": True}
