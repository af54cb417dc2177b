"""Learned demonstration retrieval trained from language-model feedback.

For each training anchor, nearby candidates (same entity-type pair) are
scored by how much a one-shot prompt built from them helps a scoring model
predict the anchor's gold label. The best-scoring candidates become
positives, the worst negatives, and a linear adapter over the frozen
embeddings is trained with a contrastive objective so that anchors land
near their positives after projection. Retrieval then runs the same exact
cosine scan as the unlearned path, but in the projected space.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from icl_re.corpus import Corpus, REInstance
from icl_re.knn import Neighbor, VectorIndex
from icl_re.prompting import render_instance
from icl_re.providers.base import ProviderError

logger = logging.getLogger(__name__)

ADAPTER_FORMAT_VERSION = 1


class InsufficientCandidates(ValueError):
    """Too few same-pair training instances to mine candidates from."""


class CandidateScoringError(RuntimeError):
    """A provider failure while scoring one candidate."""

    def __init__(self, candidate_id: str, cause: Exception):
        super().__init__(f"scoring candidate {candidate_id!r} failed: {cause}")
        self.candidate_id = candidate_id


class TrainingDiverged(RuntimeError):
    """Adapter training produced a non-finite loss or weight."""

    def __init__(self, lr: float, epoch: int, batch: int):
        super().__init__(
            f"training diverged at epoch {epoch}, batch {batch} (lr={lr}); "
            f"reduce the learning rate"
        )
        self.lr = lr
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class ScoredCandidate:
    candidate_id: str
    score: float


@dataclass(frozen=True)
class TrainingPair:
    """One anchor with one positive and that anchor's shared negatives."""

    anchor_id: str
    positive_id: str
    negative_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.negative_ids:
            raise ValueError("a training pair needs at least one negative")
        ids = {self.anchor_id, self.positive_id, *self.negative_ids}
        if len(ids) != 2 + len(self.negative_ids):
            raise ValueError(
                f"anchor, positive, and negatives must be distinct ids "
                f"(anchor={self.anchor_id!r})"
            )


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0
    temperature: float = 0.1
    in_batch_negatives: bool = False


@dataclass
class AdapterModel:
    """A linear map over frozen embeddings, trained contrastively."""

    weight: np.ndarray
    settings: TrainSettings
    loss_curve: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    def project(self, vector: np.ndarray) -> np.ndarray:
        return self.weight @ np.asarray(vector, dtype=np.float64)


def mine_candidates(
    corpus: Corpus,
    index: VectorIndex,
    anchor: REInstance,
    count: int,
) -> list[str]:
    """Nearest same-pair train instances to the anchor, by raw embedding.

    Returns up to `count` candidate ids, anchor excluded. Raises
    InsufficientCandidates when fewer than two other same-pair train
    instances exist, since positives and negatives could not both be drawn.
    """
    if count < 1:
        raise ValueError(f"candidate count must be >= 1, got {count}")
    pool = {
        iid
        for iid in corpus.by_type_pair.get(anchor.type_pair, ())
        if iid != anchor.id and corpus.get(iid).split == "train" and iid in index
    }
    if len(pool) < 2:
        raise InsufficientCandidates(
            f"anchor {anchor.id!r} has only {len(pool)} same-pair train "
            f"instances in the index; need at least 2"
        )
    exclude = set(index.ids) - pool
    query = index.get_vector(anchor.id)
    neighbors = index.query(query, k=count, exclude=exclude)
    return [n.id for n in neighbors]


def scoring_prefix(candidate: REInstance, anchor: REInstance) -> str:
    """One-shot prompt prefix: labelled candidate, then the anchor's input."""
    return (
        render_instance(candidate, with_label=True)
        + "\n"
        + render_instance(anchor, with_label=False)
        + "\nRelation:"
    )


def score_candidates(
    scorer,
    corpus: Corpus,
    anchor: REInstance,
    candidate_ids: Sequence[str],
    mode: str = "sum",
) -> list[ScoredCandidate]:
    """Score each candidate by the anchor label's logprob under the scorer.

    mode "sum" uses the total logprob, "per_token" divides by the target's
    token count. Output order matches candidate_ids. Provider failures are
    re-raised with the offending candidate id attached.
    """
    if mode not in ("sum", "per_token"):
        raise ValueError(f"unknown scoring mode {mode!r}")
    out: list[ScoredCandidate] = []
    for cid in candidate_ids:
        prefix = scoring_prefix(corpus.get(cid), anchor)
        try:
            result = scorer.score_output(prefix, anchor.relation)
        except ProviderError as exc:
            raise CandidateScoringError(cid, exc) from exc
        score = result.total_logprob if mode == "sum" else result.per_token()
        out.append(ScoredCandidate(candidate_id=cid, score=score))
    return out


def label_pairs(
    scored: Sequence[ScoredCandidate],
    anchor_id: str,
    positives: int,
    negatives: int,
) -> list[TrainingPair]:
    """Top `positives` candidates by score each pair with the bottom `negatives`.

    Candidates are ranked by (score descending, id ascending), one ranking
    shared by both ends so positives and negatives can never overlap as long
    as positives + negatives <= len(scored).
    """
    if positives < 1 or negatives < 1:
        raise ValueError("positives and negatives must both be >= 1")
    if positives + negatives > len(scored):
        raise ValueError(
            f"need at least {positives + negatives} scored candidates, "
            f"got {len(scored)}"
        )
    ranking = sorted(scored, key=lambda s: (-s.score, s.candidate_id))
    negative_ids = tuple(s.candidate_id for s in ranking[-negatives:])
    return [
        TrainingPair(
            anchor_id=anchor_id,
            positive_id=ranking[i].candidate_id,
            negative_ids=negative_ids,
        )
        for i in range(positives)
    ]


def info_nce(positive_logit: float, negative_logits: Sequence[float]) -> float:
    """Contrastive loss: -log softmax of the positive among all logits."""
    logits = np.concatenate(([positive_logit], np.asarray(negative_logits, float)))
    peak = float(np.max(logits))
    return float(peak - positive_logit + np.log(np.sum(np.exp(logits - peak))))


def _pair_loss_and_grad(
    weight: np.ndarray,
    anchor_vec: np.ndarray,
    candidate_vecs: np.ndarray,
    temperature: float,
) -> tuple[float, np.ndarray]:
    """Loss and dLoss/dW for one pair. candidate_vecs[0] is the positive.

    Similarity is the cosine of the projected vectors on both sides:
    s_j = cos(W a, W c_j), with logits s_j / temperature.
    """
    u = weight @ anchor_vec
    projected = weight @ candidate_vecs.T
    u_norm = float(np.linalg.norm(u))
    c_norms = np.linalg.norm(projected, axis=0)
    if u_norm == 0.0 or np.any(c_norms == 0.0):
        raise FloatingPointError("projection collapsed a vector to zero norm")
    u_hat = u / u_norm
    c_hat = projected / c_norms
    sims = u_hat @ c_hat

    logits = sims / temperature
    peak = np.max(logits)
    weights = np.exp(logits - peak)
    probs = weights / weights.sum()
    loss = float(-np.log(probs[0]))

    dl_ds = probs.copy()
    dl_ds[0] -= 1.0
    dl_ds /= temperature

    grad_u = (c_hat @ dl_ds - float(sims @ dl_ds) * u_hat) / u_norm
    grad_c = (np.outer(u_hat, dl_ds) - c_hat * (dl_ds * sims)) / c_norms
    grad = np.outer(grad_u, anchor_vec) + grad_c @ candidate_vecs
    return loss, grad


def _vector_table(
    embeddings: Mapping[str, object], ids: set[str], dim_hint: int | None = None
) -> dict[str, np.ndarray]:
    table: dict[str, np.ndarray] = {}
    dim = dim_hint
    for iid in ids:
        if iid not in embeddings:
            raise KeyError(f"no embedding for id {iid!r}")
        vec = embeddings[iid]
        arr = np.asarray(getattr(vec, "values", vec), dtype=np.float64)
        if dim is None:
            dim = arr.shape[0]
        if arr.ndim != 1 or arr.shape[0] != dim:
            raise ValueError(
                f"embedding for {iid!r} has shape {arr.shape}, expected ({dim},)"
            )
        table[iid] = arr
    return table


def train_adapter(
    pairs: Sequence[TrainingPair],
    embeddings: Mapping[str, object],
    settings: TrainSettings = TrainSettings(),
) -> AdapterModel:
    """Fit the linear adapter by SGD on the contrastive objective.

    The weight starts at the identity, so zero epochs reproduce raw cosine
    retrieval exactly. Pairs are shuffled each epoch with a seeded RNG;
    updates use the batch-mean gradient. The returned loss_curve has one
    mean-loss entry per epoch. With in_batch_negatives, each pair also
    treats the other positives in its batch as extra negatives.
    """
    if not pairs:
        raise ValueError("cannot train on zero pairs")
    needed = set()
    for pair in pairs:
        needed.add(pair.anchor_id)
        needed.add(pair.positive_id)
        needed.update(pair.negative_ids)
    table = _vector_table(embeddings, needed)
    dim = next(iter(table.values())).shape[0]

    weight = np.eye(dim, dtype=np.float64)
    loss_curve: list[float] = []
    if settings.epochs == 0:
        return AdapterModel(weight=weight, settings=settings, loss_curve=loss_curve)
    if settings.lr <= 0:
        raise ValueError(f"learning rate must be positive, got {settings.lr}")
    if settings.batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {settings.batch_size}")
    if settings.temperature <= 0:
        raise ValueError(f"temperature must be positive, got {settings.temperature}")

    rng = np.random.default_rng(settings.seed)
    order = np.arange(len(pairs))
    for epoch in range(settings.epochs):
        rng.shuffle(order)
        epoch_losses: list[float] = []
        for batch_index, start in enumerate(range(0, len(order), settings.batch_size)):
            batch = [pairs[i] for i in order[start : start + settings.batch_size]]
            grad_sum = np.zeros_like(weight)
            batch_loss = 0.0
            for pair in batch:
                negative_ids = list(pair.negative_ids)
                if settings.in_batch_negatives:
                    extra = [
                        other.positive_id
                        for other in batch
                        if other is not pair
                        and other.positive_id
                        not in (pair.positive_id, pair.anchor_id, *negative_ids)
                    ]
                    negative_ids.extend(dict.fromkeys(extra))
                cands = np.stack(
                    [table[pair.positive_id]] + [table[n] for n in negative_ids]
                )
                # Overflow, nan, and saturated softmax are detected below as
                # divergence, not left to numpy warnings.
                with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                    try:
                        loss, grad = _pair_loss_and_grad(
                            weight, table[pair.anchor_id], cands, settings.temperature
                        )
                    except FloatingPointError as exc:
                        raise TrainingDiverged(settings.lr, epoch, batch_index) from exc
                grad_sum += grad
                batch_loss += loss
            with np.errstate(over="ignore", invalid="ignore"):
                weight = weight - settings.lr * (grad_sum / len(batch))
            mean_loss = batch_loss / len(batch)
            if not np.isfinite(mean_loss) or not np.all(np.isfinite(weight)):
                raise TrainingDiverged(settings.lr, epoch, batch_index)
            epoch_losses.append(mean_loss)
        loss_curve.append(float(np.mean(epoch_losses)))
        logger.debug("epoch %d mean loss %.6f", epoch, loss_curve[-1])
    return AdapterModel(weight=weight, settings=settings, loss_curve=loss_curve)


class ProjectedIndex:
    """A vector index viewed through a trained adapter.

    Both the stored vectors and each query are projected by the adapter
    weight, then ranked with the exact same cosine scan as the raw index.
    With an identity weight this is bit-for-bit the raw index's ranking.
    """

    def __init__(self, adapter: AdapterModel, index: VectorIndex):
        if adapter.dim != index.dim:
            raise ValueError(
                f"adapter dim {adapter.dim} does not match index dim {index.dim}"
            )
        self.adapter = adapter
        projected = index.matrix @ adapter.weight.T
        self._inner = VectorIndex(index.ids, projected, model_tag=index.model_tag)

    @property
    def ids(self) -> tuple[str, ...]:
        return self._inner.ids

    def query(self, query_vector, k: int, exclude=()) -> list[Neighbor]:
        raw = np.asarray(getattr(query_vector, "values", query_vector), np.float64)
        return self._inner.query(self.adapter.project(raw), k=k, exclude=exclude)


def epr_retrieve(
    adapter: AdapterModel,
    index: VectorIndex,
    query_vector,
    k: int,
    exclude=(),
) -> list[Neighbor]:
    """One-off adapter-projected retrieval. Builds the projection each call;
    use ProjectedIndex directly when issuing many queries."""
    return ProjectedIndex(adapter, index).query(query_vector, k=k, exclude=exclude)


def save_adapter(model: AdapterModel, path: str | Path) -> None:
    header = {
        "dim": model.dim,
        "seed": model.settings.seed,
        "epochs": model.settings.epochs,
        "lr": model.settings.lr,
        "dtype": "f64",
        "version": ADAPTER_FORMAT_VERSION,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as handle:
        handle.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
        handle.write(np.ascontiguousarray(model.weight, dtype="<f8").tobytes())
    tmp.replace(path)


def load_adapter(path: str | Path) -> AdapterModel:
    path = Path(path)
    with open(path, "rb") as handle:
        header_line = handle.readline()
        payload = handle.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: bad adapter header: {exc}") from exc
    for key in ("dim", "seed", "epochs", "lr", "dtype", "version"):
        if key not in header:
            raise ValueError(f"{path}: adapter header missing {key!r}")
    if header["version"] != ADAPTER_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported adapter version {header['version']}")
    dim = int(header["dim"])
    expected = dim * dim * 8
    if len(payload) != expected:
        raise ValueError(
            f"{path}: expected {expected} weight bytes for dim {dim}, "
            f"found {len(payload)}"
        )
    weight = np.frombuffer(payload, dtype="<f8").reshape(dim, dim).copy()
    settings = TrainSettings(
        epochs=int(header["epochs"]), lr=float(header["lr"]), seed=int(header["seed"])
    )
    return AdapterModel(weight=weight, settings=settings, loss_curve=[])
