"""Few-shot nearest-class-mean classification in embedding space.

A query is embedded, its squared distance to every support embedding is
computed, distances are averaged per class, and the class with the smallest
average wins. Distances are averaged, never the embeddings themselves.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import EmbeddingNet, embed, embed_one

UNIT_NORM_ATOL = 1e-4
DISTANCE_BOUND = 4.0 + 1e-6


@dataclass(frozen=True)
class SupportSet:
    """Immutable per-class support embeddings, in class registration order."""

    class_labels: Tuple[str, ...]
    embeddings: Tuple[np.ndarray, ...]
    source_ids: Tuple[Tuple[str, ...], ...]

    def __post_init__(self):
        if len(self.class_labels) == 0:
            raise ValueError("support set needs at least one class")
        if len(set(self.class_labels)) != len(self.class_labels):
            raise ValueError(f"duplicate class labels: {self.class_labels}")
        if not (len(self.class_labels) == len(self.embeddings) == len(self.source_ids)):
            raise ValueError("class_labels, embeddings and source_ids must align")
        for label, emb, ids in zip(self.class_labels, self.embeddings, self.source_ids):
            if emb.ndim != 2 or emb.shape[0] == 0:
                raise ValueError(f"class {label!r} needs at least one support embedding")
            if len(ids) != emb.shape[0]:
                raise ValueError(f"class {label!r}: {len(ids)} ids for {emb.shape[0]} embeddings")
            norms = np.linalg.norm(emb, axis=1)
            off = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_ATOL)
            if off.size:
                raise ValueError(
                    f"class {label!r} has non-unit support embeddings at rows {off.tolist()}")

    @property
    def n_classes(self) -> int:
        return len(self.class_labels)

    @property
    def shots(self) -> Tuple[int, ...]:
        return tuple(e.shape[0] for e in self.embeddings)


@dataclass(frozen=True)
class ClassificationResult:
    predicted_label: str
    mean_distances: Dict[str, float]
    per_support_distances: Dict[str, Tuple[float, ...]]
    tie: bool

    def __post_init__(self):
        best = self.mean_distances[self.predicted_label]
        for label, value in self.mean_distances.items():
            if value < -1e-9 or value > DISTANCE_BOUND:
                raise ValueError(f"mean distance for {label!r} out of [0, 4]: {value}")
            if value < best:
                raise ValueError(
                    f"predicted {self.predicted_label!r} (d={best}) is not the argmin; "
                    f"{label!r} has {value}")


def build_support_set(
    model: EmbeddingNet,
    frames: np.ndarray,
    labels: Sequence[str],
    source_ids: Optional[Sequence[str]] = None,
) -> SupportSet:
    """Embed labeled support frames once and group them by label.

    Classes are registered in first-appearance order of `labels`, which also
    fixes tie-breaking priority.
    """
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.shape[0] == 0:
        raise ValueError("support set needs at least one labeled frame")
    if len(labels) != frames.shape[0]:
        raise ValueError(f"{frames.shape[0]} frames but {len(labels)} labels")
    if source_ids is None:
        source_ids = [f"support_{i:04d}" for i in range(frames.shape[0])]
    if len(source_ids) != frames.shape[0]:
        raise ValueError(f"{frames.shape[0]} frames but {len(source_ids)} source ids")
    all_emb = embed(model, frames, mode="eval")
    order: List[str] = []
    grouped: Dict[str, List[int]] = {}
    for i, label in enumerate(labels):
        if label not in grouped:
            grouped[label] = []
            order.append(label)
        grouped[label].append(i)
    shots = {label: len(idx) for label, idx in grouped.items()}
    if len(set(shots.values())) > 1:
        warnings.warn(f"unequal support counts per class: {shots}", RuntimeWarning)
    return SupportSet(
        class_labels=tuple(order),
        embeddings=tuple(all_emb[np.array(grouped[label])] for label in order),
        source_ids=tuple(tuple(source_ids[i] for i in grouped[label]) for label in order),
    )


def classify(query_embedding: np.ndarray, support_set: SupportSet) -> ClassificationResult:
    """Average query-to-support squared distances per class; smallest wins.

    Exact ties go to the earliest registered class and set the tie flag.
    """
    q = np.asarray(query_embedding, dtype=np.float64).ravel()
    norm = np.linalg.norm(q)
    if abs(norm - 1.0) > UNIT_NORM_ATOL:
        raise ValueError(f"query embedding must be unit-norm, got |q| = {norm}")
    mean_distances: Dict[str, float] = {}
    per_support: Dict[str, Tuple[float, ...]] = {}
    for label, emb in zip(support_set.class_labels, support_set.embeddings):
        d = np.sum((emb.astype(np.float64) - q) ** 2, axis=1)
        per_support[label] = tuple(float(v) for v in d)
        mean_distances[label] = float(d.mean())
    values = [mean_distances[label] for label in support_set.class_labels]
    best = int(np.argmin(values))
    tie = sum(v == values[best] for v in values) > 1
    return ClassificationResult(
        predicted_label=support_set.class_labels[best],
        mean_distances=mean_distances,
        per_support_distances=per_support,
        tie=tie,
    )


def classify_pattern(model: EmbeddingNet, image: np.ndarray, support_set: SupportSet) -> ClassificationResult:
    """Embed one frame and classify it; identical to composing the two steps."""
    return classify(embed_one(model, image), support_set)
