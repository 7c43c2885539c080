"""Evaluation harness: confusion matrices, few-shot episodes, and the three
experiment protocols (fluence sweep, particle-size sweep, masking comparison).

Every runner returns an ExperimentReport that can be serialized to JSON and
to a flat CSV table, and every metric is recomputable from the stored
per-query records.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from .baseline import NON_SINGLE_HIT, BinaryHitNet, predict_probabilities, relabel_binary
from .dataset import SpeckleDataset
from .fewshot import build_support_set, classify
from .model import EmbeddingNet, embed
from .simulate import (
    ATOM_RANGE,
    SINGLE_HIT,
    SIZE_BINS,
    DetectorGeometry,
    build_dataset,
    size_bin_edges,
)

EVAL_STREAM = 4
EMBED_CHUNK = 256
DEFAULT_FLUENCE_FACTORS = tuple(10.0 ** (-2.0 + 0.5 * k) for k in range(9))
BINARY_CLASSES = (SINGLE_HIT, NON_SINGLE_HIT)


# ---------------------------------------------------------------------------
# Confusion matrix and scalar metrics


class ConfusionMatrix:
    """Counts[true][predicted] over a fixed class list."""

    def __init__(self, classes: Sequence[str], counts: Optional[np.ndarray] = None):
        self.classes = tuple(classes)
        if len(set(self.classes)) != len(self.classes) or not self.classes:
            raise ValueError("classes must be non-empty and unique")
        n = len(self.classes)
        if counts is None:
            counts = np.zeros((n, n), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (n, n) or np.any(counts < 0):
            raise ValueError(f"counts must be nonnegative with shape {(n, n)}")
        self.counts = counts
        self._index = {c: i for i, c in enumerate(self.classes)}

    def add(self, true_label: str, predicted_label: str, count: int = 1) -> None:
        try:
            self.counts[self._index[true_label], self._index[predicted_label]] += count
        except KeyError as exc:
            raise ValueError(f"unknown class {exc.args[0]!r}") from None

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ConfusionMatrix":
        return cls(d["classes"], np.asarray(d["counts"]))

    def __eq__(self, other) -> bool:
        return (isinstance(other, ConfusionMatrix)
                and self.classes == other.classes
                and np.array_equal(self.counts, other.counts))


@dataclass(frozen=True)
class MetricsSummary:
    accuracy: float
    per_class_f1: Dict[str, float]
    macro_f1: float

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "per_class_f1": dict(self.per_class_f1),
                "macro_f1": self.macro_f1}


def metrics(cm: ConfusionMatrix) -> MetricsSummary:
    """Accuracy, per-class F1 (0 when precision+recall is 0), macro F1."""
    total = cm.total
    if total == 0:
        raise ValueError("confusion matrix is empty")
    accuracy = float(np.trace(cm.counts)) / total
    per_class = {}
    for i, c in enumerate(cm.classes):
        tp = float(cm.counts[i, i])
        col = float(cm.counts[:, i].sum())
        row = float(cm.counts[i, :].sum())
        precision = tp / col if col > 0 else 0.0
        recall = tp / row if row > 0 else 0.0
        denom = precision + recall
        per_class[c] = 2.0 * precision * recall / denom if denom > 0 else 0.0
    macro = float(np.mean(list(per_class.values())))
    return MetricsSummary(accuracy=accuracy, per_class_f1=per_class, macro_f1=macro)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class ExperimentReport:
    protocol: str
    config: dict
    results: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "config": self.config,
                "results": self.results}

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def save_csv(self, path) -> None:
        """Write results["table"] (flat per-condition rows) for plotting."""
        rows = self.results.get("table", [])
        if not rows:
            raise ValueError("report has no table rows")
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)


# ---------------------------------------------------------------------------
# Few-shot episode evaluation


def _embed_chunked(model: EmbeddingNet, frames: np.ndarray) -> np.ndarray:
    parts = [embed(model, frames[s:s + EMBED_CHUNK])
             for s in range(0, len(frames), EMBED_CHUNK)]
    return np.concatenate(parts, axis=0)


def _class_indices(dataset: SpeckleDataset, classes: Sequence[str]) -> Dict[str, np.ndarray]:
    labels = np.array(dataset.labels)
    return {c: np.flatnonzero(labels == c) for c in classes}


def confusion_from_records(records: Sequence[dict], classes: Sequence[str]) -> ConfusionMatrix:
    cm = ConfusionMatrix(classes)
    for r in records:
        cm.add(r["true"], r["predicted"])
    return cm


def run_fewshot_eval(
    model: EmbeddingNet,
    dataset: SpeckleDataset,
    shots: int,
    n_episodes: int = 20,
    seed: int = 0,
    classes: Optional[Sequence[str]] = None,
) -> ExperimentReport:
    """N-way X-shot episodes over one dataset.

    Each episode draws `shots` supports per class, classifies every other
    frame of those classes, and accumulates a confusion matrix. Supports
    are never queries within the same episode.
    """
    if shots < 1:
        raise ValueError("shots must be positive")
    if n_episodes < 1:
        raise ValueError("n_episodes must be positive")
    if classes is None:
        classes = sorted(set(dataset.labels))
    by_class = _class_indices(dataset, classes)
    for c in classes:
        if len(by_class[c]) < shots + 1:
            raise ValueError(
                f"class {c!r} has {len(by_class[c])} frames; "
                f"needs at least {shots + 1} for {shots}-shot episodes")
    cm = ConfusionMatrix(classes)
    per_query: List[dict] = []
    episode_accuracy: List[float] = []
    for episode in range(n_episodes):
        rng = np.random.default_rng([seed, EVAL_STREAM, episode])
        support_idx: List[int] = []
        support_labels: List[str] = []
        query_idx: List[int] = []
        for c in classes:
            chosen = rng.choice(by_class[c], size=shots, replace=False)
            support_idx.extend(int(i) for i in chosen)
            support_labels.extend([c] * shots)
            query_idx.extend(int(i) for i in by_class[c] if i not in set(chosen))
        support = build_support_set(
            model, dataset.frames[support_idx], support_labels,
            source_ids=[dataset.records[i].frame_id for i in support_idx])
        emb = _embed_chunked(model, dataset.frames[query_idx])
        hits = 0
        for row, qi in enumerate(emb):
            true_label = dataset.records[query_idx[row]].label
            result = classify(qi, support)
            cm.add(true_label, result.predicted_label)
            hits += int(result.predicted_label == true_label)
            per_query.append({
                "episode": episode,
                "frame_id": dataset.records[query_idx[row]].frame_id,
                "true": true_label,
                "predicted": result.predicted_label,
                "tie": result.tie,
            })
        episode_accuracy.append(hits / len(query_idx))
    summary = metrics(cm)
    report = ExperimentReport(
        protocol="fewshot",
        config={"shots": shots, "n_episodes": n_episodes, "seed": seed,
                "classes": list(classes)},
    )
    report.results = {
        "confusion": cm.to_dict(),
        "metrics": summary.to_dict(),
        "accuracy_mean": float(np.mean(episode_accuracy)),
        "accuracy_std": float(np.std(episode_accuracy)),
        "episode_accuracy": episode_accuracy,
        "per_query": per_query,
        "table": [{
            "shots": shots, "episodes": n_episodes,
            "accuracy": float(np.mean(episode_accuracy)),
            "accuracy_std": float(np.std(episode_accuracy)),
            "macro_f1": summary.macro_f1,
        }],
    }
    return report


# ---------------------------------------------------------------------------
# Fluence sweep


def run_fluence_sweep(
    model: EmbeddingNet,
    n_samples: int,
    patterns_per_category: int,
    categories: Sequence[str],
    shots_list: Sequence[int] = (1, 5),
    factors: Sequence[float] = DEFAULT_FLUENCE_FACTORS,
    n_episodes: int = 20,
    seed: int = 0,
    geometry: Optional[DetectorGeometry] = None,
) -> ExperimentReport:
    """Few-shot accuracy versus incident fluence.

    Each factor re-renders the same particles in the same orientations with
    fluence rescaled, so conditions differ only in photon budget. Conditions
    are evaluated independently; their order never matters.
    """
    factors = [float(f) for f in factors]
    if any(not math.isfinite(f) or f <= 0 for f in factors):
        raise ValueError("fluence factors must be finite and positive")
    geometry = geometry or DetectorGeometry()
    table = []
    for factor in factors:
        ds = SpeckleDataset.from_patterns(
            build_dataset(n_samples, patterns_per_category, categories,
                          geometry=geometry, seed=seed, fluence_scale=factor),
            geometry=geometry, seed=seed)
        for shots in shots_list:
            sub = run_fewshot_eval(model, ds, shots, n_episodes=n_episodes, seed=seed)
            table.append({
                "fluence_factor": factor,
                "shots": shots,
                "accuracy": sub.results["accuracy_mean"],
                "accuracy_std": sub.results["accuracy_std"],
                "macro_f1": sub.results["metrics"]["macro_f1"],
                "episodes": n_episodes,
            })
    report = ExperimentReport(
        protocol="fluence_sweep",
        config={"factors": factors, "shots_list": list(shots_list),
                "n_samples": n_samples,
                "patterns_per_category": patterns_per_category,
                "categories": list(categories), "n_episodes": n_episodes,
                "seed": seed},
    )
    report.results = {"table": table}
    return report


# ---------------------------------------------------------------------------
# Detector masking comparison


def apply_visibility(frames: np.ndarray, masks: np.ndarray, visible_fraction: float) -> Tuple[np.ndarray, np.ndarray]:
    """Keep one corner region covering visible_fraction of the area.

    The remainder is zeroed in the frames and flagged invalid in the masks.
    visible_fraction 1.0 returns the inputs unchanged (copies).
    """
    if not 0.0 < visible_fraction <= 1.0:
        raise ValueError(f"visible_fraction must be in (0,1], got {visible_fraction}")
    frames = np.array(frames, copy=True)
    masks = np.array(masks, copy=True)
    if visible_fraction == 1.0:
        return frames, masks
    side_r = int(round(frames.shape[1] * math.sqrt(visible_fraction)))
    side_c = int(round(frames.shape[2] * math.sqrt(visible_fraction)))
    frames[:, side_r:, :] = 0.0
    frames[:, :, side_c:] = 0.0
    masks[:, side_r:, :] = False
    masks[:, :, side_c:] = False
    return frames, masks


def _binary_fewshot_records(
    model: EmbeddingNet,
    dataset: SpeckleDataset,
    shots: int,
    n_episodes: int,
    seed: int,
) -> List[dict]:
    """Few-shot episodes with predictions collapsed to the binary task."""
    report = run_fewshot_eval(model, dataset, shots, n_episodes=n_episodes, seed=seed)
    records = []
    for r in report.results["per_query"]:
        records.append({
            "episode": r["episode"], "frame_id": r["frame_id"],
            "true": SINGLE_HIT if relabel_binary(r["true"]) else NON_SINGLE_HIT,
            "predicted": SINGLE_HIT if relabel_binary(r["predicted"]) else NON_SINGLE_HIT,
            "tie": r["tie"],
        })
    return records


def _baseline_records(model: BinaryHitNet, dataset: SpeckleDataset) -> List[dict]:
    probs = predict_probabilities(model, dataset.frames)
    records = []
    for i, rec in enumerate(dataset.records):
        predicted = SINGLE_HIT if probs[i] >= model.config.threshold else NON_SINGLE_HIT
        records.append({
            "frame_id": rec.frame_id,
            "true": SINGLE_HIT if relabel_binary(rec.label) else NON_SINGLE_HIT,
            "predicted": predicted,
            "probability": float(probs[i]),
        })
    return records


def run_masking_comparison(
    embedding_model: EmbeddingNet,
    baseline_model: BinaryHitNet,
    dataset: SpeckleDataset,
    visible_fraction: float = 0.25,
    shots: int = 5,
    n_episodes: int = 20,
    seed: int = 0,
) -> ExperimentReport:
    """Both models on identical frames, full versus partly visible detector.

    Binary single-hit task; F1 is reported for the single-hit class. The
    embedding model gets its supports from the same condition's pool, so
    both routes see only what the degraded detector would provide.
    """
    masked_frames, masked_masks = apply_visibility(
        dataset.frames, dataset.masks, visible_fraction)
    masked = SpeckleDataset(
        frames=masked_frames, masks=masked_masks,
        records=dataset.records, geometry=dataset.geometry, seed=dataset.seed)
    conditions = {"full": dataset, "masked": masked}
    results: Dict[str, dict] = {"specklenn": {}, "baseline": {}}
    table = []
    for name, ds in conditions.items():
        emb_records = _binary_fewshot_records(
            embedding_model, ds, shots, n_episodes, seed)
        base_records = _baseline_records(baseline_model, ds)
        for route, records in (("specklenn", emb_records), ("baseline", base_records)):
            cm = confusion_from_records(records, BINARY_CLASSES)
            summary = metrics(cm)
            results[route][name] = {
                "confusion": cm.to_dict(),
                "accuracy": summary.accuracy,
                "f1_single_hit": summary.per_class_f1[SINGLE_HIT],
                "per_query": records,
            }
            table.append({
                "model": route, "condition": name,
                "visible_fraction": 1.0 if name == "full" else visible_fraction,
                "accuracy": summary.accuracy,
                "f1_single_hit": summary.per_class_f1[SINGLE_HIT],
            })
    report = ExperimentReport(
        protocol="masking_comparison",
        config={"visible_fraction": visible_fraction, "shots": shots,
                "n_episodes": n_episodes, "seed": seed},
    )
    report.results = {**results, "table": table}
    return report


# ---------------------------------------------------------------------------
# Particle-size sweep


def run_size_sweep(
    model: EmbeddingNet,
    samples_per_bin: int,
    patterns_per_category: int,
    categories: Sequence[str] = ("single", "double"),
    shots: int = 5,
    n_episodes: int = 10,
    seed: int = 0,
    bins: int = SIZE_BINS,
    atom_range: Tuple[int, int] = ATOM_RANGE,
    fluence_levels: Sequence[float] = (1.0, 100.0),
    geometry: Optional[DetectorGeometry] = None,
) -> ExperimentReport:
    """Per-size-bin accuracy at each fluence level, plus the Spearman
    correlation between bin size and accuracy per level."""
    geometry = geometry or DetectorGeometry()
    edges = size_bin_edges(atom_range[0], atom_range[1], bins)
    table = []
    accuracy_by_level: Dict[float, List[float]] = {float(f): [] for f in fluence_levels}
    for b in range(bins):
        lo, hi = float(edges[b]), float(edges[b + 1])
        rng = np.random.default_rng([seed, EVAL_STREAM, b])
        n_atoms = [int(a) for a in rng.integers(int(lo), int(hi), size=samples_per_bin)]
        for level in fluence_levels:
            level = float(level)
            ds = SpeckleDataset.from_patterns(
                build_dataset(samples_per_bin, patterns_per_category, categories,
                              geometry=geometry, seed=seed, fluence_scale=level,
                              n_atoms_per_sample=n_atoms),
                geometry=geometry, seed=seed)
            sub = run_fewshot_eval(model, ds, shots, n_episodes=n_episodes, seed=seed)
            accuracy_by_level[level].append(sub.results["accuracy_mean"])
            table.append({
                "bin": b, "atoms_low": lo, "atoms_high": hi,
                "fluence_factor": level,
                "n_frames": len(ds),
                "accuracy": sub.results["accuracy_mean"],
                "macro_f1": sub.results["metrics"]["macro_f1"],
            })
    spearman = {}
    centers = [(float(edges[b]) + float(edges[b + 1])) / 2.0 for b in range(bins)]
    for level, accs in accuracy_by_level.items():
        if len(set(accs)) > 1:
            rho = float(spearmanr(centers, accs)[0])
        else:
            rho = 0.0  # constant accuracy: no size dependence by definition
        spearman[str(level)] = rho
    report = ExperimentReport(
        protocol="size_sweep",
        config={"samples_per_bin": samples_per_bin,
                "patterns_per_category": patterns_per_category,
                "categories": list(categories), "shots": shots,
                "n_episodes": n_episodes, "seed": seed, "bins": bins,
                "atom_range": list(atom_range),
                "fluence_levels": [float(f) for f in fluence_levels]},
    )
    report.results = {"table": table, "spearman": spearman,
                      "bin_edges": [float(e) for e in edges]}
    return report
