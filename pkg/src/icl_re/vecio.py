"""Packed vector-matrix files: a JSON header line, then raw little-endian data.

Layout: the first line is a JSON object {"count", "dim", "model_tag", "dtype",
"version"}; the remaining bytes are the matrix row-major. Instance ids live in
a sidecar JSON list at <path>.ids.json so the binary stays a plain dump.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class VectorFileError(ValueError):
    """Corrupt or inconsistent vector file."""


def ids_path(path: str | Path) -> Path:
    return Path(str(path) + ".ids.json")


def save_matrix(
    path: str | Path,
    ids: list[str],
    matrix: np.ndarray,
    model_tag: str,
    dtype: str = "f32",
) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise VectorFileError(f"expected a 2-d matrix, got shape {matrix.shape}")
    if len(ids) != matrix.shape[0]:
        raise VectorFileError(
            f"{len(ids)} ids for {matrix.shape[0]} rows"
        )
    if dtype not in _DTYPES:
        raise VectorFileError(f"dtype must be one of {sorted(_DTYPES)}, got {dtype!r}")
    header = {
        "count": matrix.shape[0],
        "dim": matrix.shape[1],
        "model_tag": model_tag,
        "dtype": dtype,
        "version": FORMAT_VERSION,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as handle:
        handle.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
        handle.write(np.ascontiguousarray(matrix, dtype=_DTYPES[dtype]).tobytes())
    tmp.replace(path)
    ids_path(path).write_text(json.dumps(ids), encoding="utf-8")


def load_matrix(path: str | Path) -> tuple[list[str], np.ndarray, str]:
    """Read a matrix file; returns (ids, float64 matrix, model_tag)."""
    path = Path(path)
    with open(path, "rb") as handle:
        header_line = handle.readline()
        payload = handle.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        raise VectorFileError(f"{path}: bad header line: {exc}") from exc
    for key in ("count", "dim", "model_tag", "dtype", "version"):
        if key not in header:
            raise VectorFileError(f"{path}: header missing {key!r}")
    if header["version"] != FORMAT_VERSION:
        raise VectorFileError(
            f"{path}: unsupported format version {header['version']}"
        )
    if header["dtype"] not in _DTYPES:
        raise VectorFileError(f"{path}: unknown dtype {header['dtype']!r}")
    np_dtype = _DTYPES[header["dtype"]]
    count, dim = header["count"], header["dim"]
    expected = count * dim * np_dtype.itemsize
    if len(payload) != expected:
        raise VectorFileError(
            f"{path}: expected {expected} data bytes for {count}x{dim} "
            f"{header['dtype']}, found {len(payload)}"
        )
    matrix = np.frombuffer(payload, dtype=np_dtype).reshape(count, dim)

    sidecar = ids_path(path)
    if not sidecar.exists():
        raise VectorFileError(f"{path}: missing id sidecar {sidecar}")
    ids = json.loads(sidecar.read_text(encoding="utf-8"))
    if not isinstance(ids, list) or len(ids) != count:
        raise VectorFileError(
            f"{sidecar}: expected a list of {count} ids"
        )
    return list(ids), matrix.astype(np.float64), str(header["model_tag"])
