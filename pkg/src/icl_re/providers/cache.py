"""Content-addressed response cache keyed by request body.

Each entry is a JSON file at <root>/<capability>/<digest[:2]>/<digest>.json
holding the request, the response, and a creation timestamp. The digest is
the sha256 of (capability, model tag, canonicalized request body), so any
change to the effective request produces a different key.
"""

from __future__ import annotations

import hashlib
import json
import os
from datetime import datetime, timezone
from pathlib import Path


def canonical_body(body: dict) -> str:
    return json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def cache_key(capability: str, model_tag: str, body: dict) -> str:
    material = "\n".join([capability, model_tag, canonical_body(body)])
    return hashlib.sha256(material.encode("utf-8")).hexdigest()


class ResponseCache:
    """Disk cache for provider responses. A falsy root disables caching."""

    def __init__(self, root: str | Path | None):
        self.root = Path(root) if root else None

    @property
    def enabled(self) -> bool:
        return self.root is not None

    def _path(self, capability: str, key: str) -> Path:
        assert self.root is not None
        return self.root / capability / key[:2] / f"{key}.json"

    def get(self, capability: str, key: str) -> dict | None:
        if self.root is None:
            return None
        path = self._path(capability, key)
        if not path.exists():
            return None
        entry = json.loads(path.read_text(encoding="utf-8"))
        return entry["response"]

    def put(self, capability: str, key: str, request: dict, response: dict) -> None:
        if self.root is None:
            return
        path = self._path(capability, key)
        path.parent.mkdir(parents=True, exist_ok=True)
        entry = {
            "request": request,
            "response": response,
            "created_at": datetime.now(timezone.utc).isoformat(),
        }
        tmp = path.with_suffix(f".tmp{os.getpid()}")
        tmp.write_text(json.dumps(entry, sort_keys=True), encoding="utf-8")
        tmp.replace(path)
