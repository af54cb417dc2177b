"""Exact k-nearest-neighbour retrieval over dense vectors by cosine similarity.

A flat float64 matrix scan. Ties in similarity are broken by ascending
instance id, so results are fully deterministic for fixed inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from icl_re import vecio

ZERO_NORM_EPS = 1e-12


class IndexBuildError(ValueError):
    """Invalid inputs while building or loading an index."""


class DimensionMismatch(IndexBuildError):
    """Vector dimension differs from the index dimension."""


@dataclass(frozen=True)
class Neighbor:
    id: str
    similarity: float


def _as_array(vector) -> np.ndarray:
    values = getattr(vector, "values", vector)
    return np.asarray(values, dtype=np.float64)


class VectorIndex:
    """Immutable (ids, matrix) store supporting exact cosine top-k queries."""

    def __init__(self, ids: Sequence[str], matrix: np.ndarray, model_tag: str = ""):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise IndexBuildError(f"expected a 2-d matrix, got shape {matrix.shape}")
        if len(ids) != matrix.shape[0]:
            raise IndexBuildError(f"{len(ids)} ids for {matrix.shape[0]} vectors")
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if list(ids).count(i) > 1})
            raise IndexBuildError(f"duplicate ids in index: {dupes[:5]}")
        norms = np.linalg.norm(matrix, axis=1)
        zero_rows = np.nonzero(norms < ZERO_NORM_EPS)[0]
        if zero_rows.size:
            raise IndexBuildError(
                f"zero vector for id {ids[int(zero_rows[0])]!r}"
            )
        self.ids: tuple[str, ...] = tuple(ids)
        self.matrix = matrix
        self.norms = norms
        self.model_tag = model_tag
        self._row_of = {iid: row for row, iid in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, instance_id: str) -> bool:
        return instance_id in self._row_of

    def get_vector(self, instance_id: str) -> np.ndarray:
        if instance_id not in self._row_of:
            raise KeyError(f"no vector for id {instance_id!r}")
        return self.matrix[self._row_of[instance_id]]

    def query(
        self,
        query_vector,
        k: int,
        exclude: Iterable[str] = (),
    ) -> list[Neighbor]:
        """Top-k entries by cosine similarity, ties broken by ascending id.

        Returns min(k, eligible) neighbours, eligible being the index entries
        not in `exclude`.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        q = _as_array(query_vector)
        if q.ndim != 1 or q.shape[0] != self.dim:
            raise DimensionMismatch(
                f"query has shape {q.shape}, index dimension is {self.dim}"
            )
        qnorm = float(np.linalg.norm(q))
        if qnorm < ZERO_NORM_EPS:
            raise ValueError("query vector has zero norm")
        excluded = set(exclude)
        sims = (self.matrix @ q) / (self.norms * qnorm)
        order = sorted(
            (row for row in range(len(self.ids)) if self.ids[row] not in excluded),
            key=lambda row: (-sims[row], self.ids[row]),
        )
        return [Neighbor(self.ids[row], float(sims[row])) for row in order[:k]]


def build_index(items: Sequence[tuple[str, object]], model_tag: str = "") -> VectorIndex:
    """Build an index from (id, vector) pairs.

    Rejects dimension mismatches, zero vectors, and duplicate ids. Vectors
    may be EmbeddingVector values or plain numeric sequences.
    """
    if not items:
        raise IndexBuildError("cannot build an index from zero items")
    ids = [iid for iid, _ in items]
    arrays = [_as_array(vec) for _, vec in items]
    dim = arrays[0].shape[0] if arrays[0].ndim == 1 else -1
    for iid, arr in zip(ids, arrays):
        if arr.ndim != 1:
            raise IndexBuildError(f"vector for id {iid!r} is not 1-d")
        if arr.shape[0] != dim:
            raise DimensionMismatch(
                f"vector for id {iid!r} has dim {arr.shape[0]}, expected {dim}"
            )
    tags = {getattr(vec, "model_tag", None) for _, vec in items}
    tags.discard(None)
    if not model_tag and len(tags) == 1:
        model_tag = tags.pop()
    elif len(tags) > 1:
        raise IndexBuildError(f"mixed model tags in index input: {sorted(tags)}")
    return VectorIndex(ids, np.stack(arrays), model_tag=model_tag)


def save_index(index: VectorIndex, path: str | Path) -> None:
    vecio.save_matrix(path, list(index.ids), index.matrix, index.model_tag, dtype="f32")


def load_index(path: str | Path) -> VectorIndex:
    ids, matrix, model_tag = vecio.load_matrix(path)
    try:
        return VectorIndex(ids, matrix, model_tag=model_tag)
    except IndexBuildError as exc:
        raise vecio.VectorFileError(f"{path}: {exc}") from exc
