"""Triplet loss over unit-sphere embeddings and per-batch semi-hard mining.

A triplet pairs an anchor with a positive from the same source sample and
class, and a negative from any other class. Mining keeps only triplets in
the semi-hard band: the negative sits farther than the positive but inside
the margin, so the hinge is active without being dominated by outliers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .tensor import Tensor, relu, tsum

EASY = "easy"
SEMI_HARD = "semi_hard"
HARD = "hard"

# Squared L2 distance between unit vectors never exceeds 4, so margins
# above 4 would make the semi-hard band unsatisfiable.
MAX_MARGIN = 4.0


@dataclass(frozen=True)
class Triplet:
    anchor_idx: int
    positive_idx: int
    negative_idx: int
    anchor_label: object
    positive_label: object
    negative_label: object
    anchor_sample_id: object
    positive_sample_id: object

    def __post_init__(self):
        if self.anchor_idx == self.positive_idx:
            raise ValueError("anchor and positive must be different batch items")
        if self.anchor_label != self.positive_label:
            raise ValueError(
                f"anchor label {self.anchor_label!r} != positive label {self.positive_label!r}")
        if self.anchor_sample_id != self.positive_sample_id:
            raise ValueError(
                f"anchor sample {self.anchor_sample_id!r} != positive sample {self.positive_sample_id!r}")
        if self.negative_label == self.anchor_label:
            raise ValueError(f"negative shares the anchor's label {self.anchor_label!r}")

    def as_index_tuple(self):
        return (self.anchor_idx, self.positive_idx, self.negative_idx)


@dataclass(frozen=True)
class TrainerConfig:
    margin: float = 1.0
    batch_size: int = 64
    epochs: int = 30
    triplets_per_batch: int = 64
    seed: int = 0

    def validate(self) -> None:
        validate_margin(self.margin)
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 to form triplets, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.triplets_per_batch < 1:
            raise ValueError(f"triplets_per_batch must be >= 1, got {self.triplets_per_batch}")


def validate_margin(margin: float) -> None:
    if not (0.0 < margin <= MAX_MARGIN):
        raise ValueError(
            f"margin must lie in (0, {MAX_MARGIN}] for unit-norm embeddings, got {margin}")


def triplet_loss(anchors: Tensor, positives: Tensor, negatives: Tensor, margin: float) -> Tensor:
    """Sum of hinges [margin + d2(a,p) - d2(a,n)]_+ over the triplet rows."""
    validate_margin(margin)
    for name, t in (("anchors", anchors), ("positives", positives), ("negatives", negatives)):
        if t.data.ndim != 2:
            raise ValueError(f"{name} must be 2-d (N, dim), got shape {t.data.shape}")
    if not (anchors.data.shape == positives.data.shape == negatives.data.shape):
        raise ValueError(
            f"triplet role shapes differ: anchors {anchors.data.shape}, "
            f"positives {positives.data.shape}, negatives {negatives.data.shape}")
    if anchors.data.shape[0] == 0:
        warnings.warn("triplet_loss called with zero triplets; returning 0", RuntimeWarning)
        return Tensor(np.zeros((), dtype=anchors.data.dtype))
    dp = anchors - positives
    dn = anchors - negatives
    d2_ap = tsum(dp * dp, axis=1)
    d2_an = tsum(dn * dn, axis=1)
    hinge = relu(d2_ap - d2_an + margin)
    return tsum(hinge)


def classify_triplet_difficulty(d2_ap: float, d2_an: float, margin: float) -> str:
    """Bucket one candidate by where the negative falls relative to the band.

    The band is open on both sides: a negative exactly at d2_ap counts as
    hard, one exactly at d2_ap + margin counts as easy.
    """
    validate_margin(margin)
    if d2_ap < 0 or d2_an < 0:
        raise ValueError(f"squared distances must be >= 0, got d2_ap={d2_ap}, d2_an={d2_an}")
    if d2_an <= d2_ap:
        return HARD
    if d2_an >= d2_ap + margin:
        return EASY
    return SEMI_HARD


def pairwise_sq_distances(embeddings: np.ndarray) -> np.ndarray:
    """Full matrix of squared L2 distances, widened to float64 for stable
    band comparisons. Row sums run in the input dtype so results are
    reproducible against a per-pair reference."""
    emb = np.asarray(embeddings)
    n = emb.shape[0]
    out = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        out[i] = np.sum((emb - emb[i]) ** 2, axis=1)
    return out


@dataclass
class MiningResult:
    triplets: List[Triplet]
    candidate_counts: Dict[str, int] = field(
        default_factory=lambda: {EASY: 0, SEMI_HARD: 0, HARD: 0})
    no_anchor_positive_pairs: bool = False


def mine_semi_hard(
    embeddings,
    labels: Sequence,
    sample_ids: Sequence,
    margin: float,
    rng: Optional[np.random.Generator] = None,
    want: Optional[int] = None,
) -> MiningResult:
    """Enumerate every semi-hard triplet in the batch; optionally subsample.

    Anchor/positive pairs are ordered pairs of distinct items sharing both
    class label and sample id. Negatives are all items of a different class.
    With `want` set and more candidates than that, a uniform subset of size
    `want` is drawn from `rng`.
    """
    emb = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    if emb.ndim != 2:
        raise ValueError(f"embeddings must be 2-d (B, dim), got shape {emb.shape}")
    n = emb.shape[0]
    if len(labels) != n or len(sample_ids) != n:
        raise ValueError(
            f"batch size mismatch: {n} embeddings, {len(labels)} labels, {len(sample_ids)} sample ids")
    validate_margin(margin)
    labels_arr = np.asarray(labels)

    pairs = [
        (a, p)
        for a in range(n)
        for p in range(n)
        if a != p and labels[a] == labels[p] and sample_ids[a] == sample_ids[p]
    ]
    result = MiningResult(triplets=[])
    if not pairs:
        result.no_anchor_positive_pairs = True
        return result

    d2 = pairwise_sq_distances(emb)
    candidates = []
    for a, p in pairs:
        neg_indices = np.flatnonzero(labels_arr != labels_arr[a])
        d2_ap = d2[a, p]
        d2_an = d2[a, neg_indices]
        hard = d2_an <= d2_ap
        easy = d2_an >= d2_ap + margin
        semi = ~(hard | easy)
        result.candidate_counts[HARD] += int(hard.sum())
        result.candidate_counts[EASY] += int(easy.sum())
        result.candidate_counts[SEMI_HARD] += int(semi.sum())
        candidates.extend((a, p, int(g)) for g in neg_indices[semi])

    if want is not None and len(candidates) > want:
        if rng is None:
            raise ValueError(f"{len(candidates)} candidates exceed want={want}; an rng is required to subsample")
        chosen = rng.choice(len(candidates), size=want, replace=False)
        candidates = [candidates[i] for i in chosen]

    result.triplets = [
        Triplet(
            anchor_idx=a, positive_idx=p, negative_idx=g,
            anchor_label=labels[a], positive_label=labels[p], negative_label=labels[g],
            anchor_sample_id=sample_ids[a], positive_sample_id=sample_ids[p],
        )
        for a, p, g in candidates
    ]
    return result
