"""Epoch training loop: embed a shuffled mini-batch, mine semi-hard triplets
on its embeddings, backpropagate the hinge loss, and apply Adam. Validation
loss is mined over the whole validation split with no subsampling, and the
checkpoint with the best validation loss is the one retained."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import SpeckleDataset
from .model import EmbeddingNet, embed, preprocess
from .optim import AdamState, adam_step, init_adam
from .tensor import Tensor, take_rows
from .triplet import (
    TrainerConfig, mine_semi_hard, pairwise_sq_distances, triplet_loss)

TRAIN_STREAM = 3
MAX_EVAL_BATCH = 512


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    n_triplets: int
    candidate_counts: Dict[str, int]
    batches_total: int
    batches_with_triplets: int
    zero_mined: bool
    val_loss: float = math.nan
    val_triplets: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitResult:
    history: List[EpochMetrics] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    checkpoint_path: Optional[str] = None


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        chunk = order[start:start + batch_size]
        if chunk.size >= 2:
            yield chunk


def train_epoch(
    model: EmbeddingNet,
    dataset: SpeckleDataset,
    config: TrainerConfig,
    adam_state: AdamState,
    epoch: int = 0,
) -> EpochMetrics:
    """One pass over the training split; deterministic in (config.seed, epoch)."""
    config.validate()
    rng = np.random.default_rng([config.seed, TRAIN_STREAM, epoch])
    labels = dataset.labels
    sample_ids = dataset.sample_ids
    loss_total = 0.0
    n_triplets = 0
    counts = {"easy": 0, "semi_hard": 0, "hard": 0}
    batches_total = 0
    batches_with = 0
    params = model.named_parameters()
    for idx in _batches(len(dataset), config.batch_size, rng):
        batches_total += 1
        x = Tensor(preprocess(dataset.frames[idx], model.config.input_size))
        emb = model.forward(x, training=True)
        mined = mine_semi_hard(
            emb.data,
            [labels[i] for i in idx],
            [sample_ids[i] for i in idx],
            config.margin,
            rng=rng,
            want=config.triplets_per_batch,
        )
        for key, value in mined.candidate_counts.items():
            counts[key] += value
        if not mined.triplets:
            continue
        batches_with += 1
        a = take_rows(emb, np.array([t.anchor_idx for t in mined.triplets]))
        p = take_rows(emb, np.array([t.positive_idx for t in mined.triplets]))
        n = take_rows(emb, np.array([t.negative_idx for t in mined.triplets]))
        loss = triplet_loss(a, p, n, config.margin)
        model.zero_grad()
        loss.backward()
        grads = {name: param.grad for name, param in params.items()}
        adam_step(params, grads, adam_state)
        loss_total += float(loss.data.item())
        n_triplets += len(mined.triplets)
    return EpochMetrics(
        epoch=epoch,
        mean_loss=loss_total / n_triplets if n_triplets else math.nan,
        n_triplets=n_triplets,
        candidate_counts=counts,
        batches_total=batches_total,
        batches_with_triplets=batches_with,
        zero_mined=n_triplets == 0,
    )


def validation_loss(model: EmbeddingNet, dataset: SpeckleDataset, margin: float) -> tuple:
    """Mean hinge over every valid candidate triplet in the split.

    Easy candidates contribute exactly zero, so a model that satisfies the
    margin everywhere scores 0.0 rather than having no defined score.
    Returns (mean_loss, n_candidates); a split with no anchor/positive
    pairs gives (inf, 0) so it can never look like evidence of quality.
    """
    if len(dataset) == 0:
        return math.inf, 0
    chunks = [
        embed(model, dataset.frames[s:s + MAX_EVAL_BATCH])
        for s in range(0, len(dataset), MAX_EVAL_BATCH)
    ]
    emb = np.concatenate(chunks, axis=0).astype(np.float64)
    labels = np.array(dataset.labels)
    sample_ids = np.array(dataset.sample_ids)
    d2 = pairwise_sq_distances(emb)
    total = 0.0
    count = 0
    for a in range(len(dataset)):
        pos = np.flatnonzero(
            (labels == labels[a]) & (sample_ids == sample_ids[a]))
        pos = pos[pos != a]
        neg = np.flatnonzero(labels != labels[a])
        if pos.size == 0 or neg.size == 0:
            continue
        for p in pos:
            hinges = margin + d2[a, p] - d2[a, neg]
            total += float(np.sum(np.maximum(hinges, 0.0)))
            count += neg.size
    if count == 0:
        return math.inf, 0
    return total / count, count


def fit(
    model: EmbeddingNet,
    train_split: SpeckleDataset,
    val_split: SpeckleDataset,
    config: TrainerConfig,
    learning_rate: float = 1e-3,
    checkpoint_path=None,
    metrics_path=None,
) -> FitResult:
    """Train for config.epochs, tracking the best validation loss.

    When checkpoint_path is given, the best-validation model is saved there
    and loaded back into `model` before returning. Per-epoch metrics go to
    metrics_path as one JSON record per line when that is given.
    """
    config.validate()
    adam_state = init_adam(model.named_parameters(), learning_rate=learning_rate)
    result = FitResult(checkpoint_path=str(checkpoint_path) if checkpoint_path else None)
    metrics_file = open(metrics_path, "w") if metrics_path else None
    try:
        for epoch in range(config.epochs):
            metrics = train_epoch(model, train_split, config, adam_state, epoch)
            metrics.val_loss, metrics.val_triplets = validation_loss(
                model, val_split, config.margin)
            result.history.append(metrics)
            if metrics.val_loss < result.best_val_loss:
                result.best_val_loss = metrics.val_loss
                result.best_epoch = epoch
                if checkpoint_path is not None:
                    save_checkpoint(model, checkpoint_path, metadata={
                        "epoch": epoch, "val_loss": metrics.val_loss,
                        "val_triplets": metrics.val_triplets})
            if metrics_file is not None:
                metrics_file.write(json.dumps(metrics.to_dict()) + "\n")
                metrics_file.flush()
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if checkpoint_path is not None and result.best_epoch >= 0:
        best = load_checkpoint(checkpoint_path)
        params = model.named_parameters()
        for name, param in best.named_parameters().items():
            params[name].data[...] = param.data
        for name, buf in best.named_buffers().items():
            model.set_buffer(name, buf)
    return result
