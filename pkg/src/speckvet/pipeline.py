"""Split-then-augment data handling.

Splitting happens on source frames only, stratified by (sample_id, label),
so no augmented copy of a training frame can appear in validation or test.
Augmentation applies rotation, zoom, shift, and rectangle masking in that
fixed order; the validity mask rides through the same geometric transform.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .dataset import FrameRecord, SpeckleDataset

AUGMENT_STREAM = 2
# Affine entries this close to an integer are snapped, which makes
# right-angle rotations exact index permutations instead of interpolations.
SNAP_TOL = 1e-12
MASK_VALID_THRESHOLD = 0.999


class LeakageError(Exception):
    """Raised when augmented data crosses split boundaries."""


@dataclass(frozen=True)
class AugmentConfig:
    rotate: bool = True
    zoom: bool = True
    shift: bool = True
    masking: bool = True
    rotation_range: Tuple[float, float] = (0.0, 360.0)
    zoom_range: Tuple[float, float] = (0.85, 1.15)
    shift_max: int = 8
    mask_count_range: Tuple[int, int] = (1, 3)
    mask_area_range: Tuple[float, float] = (0.05, 0.25)

    def validate(self) -> None:
        if self.rotate and not (self.rotation_range[0] < self.rotation_range[1]):
            raise ValueError(f"rotation_range must be non-degenerate, got {self.rotation_range}")
        if self.zoom:
            lo, hi = self.zoom_range
            if not (0 < lo < hi):
                raise ValueError(f"zoom_range must satisfy 0 < lo < hi, got {self.zoom_range}")
        if self.shift and self.shift_max < 1:
            raise ValueError(f"shift_max must be >= 1 when shifting, got {self.shift_max}")
        if self.masking:
            lo, hi = self.mask_area_range
            if not (0 < lo <= hi < 1):
                raise ValueError(f"mask_area_range must sit inside (0, 1), got {self.mask_area_range}")
            if self.mask_count_range[0] < 1 or self.mask_count_range[0] > self.mask_count_range[1]:
                raise ValueError(f"mask_count_range invalid: {self.mask_count_range}")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(rotate=False, zoom=False, shift=False, masking=False)


def _snap(matrix: np.ndarray) -> np.ndarray:
    rounded = np.round(matrix)
    close = np.abs(matrix - rounded) < SNAP_TOL
    return np.where(close, rounded, matrix)


def geometric_transform(
    intensity: np.ndarray,
    mask: np.ndarray,
    angle_deg: float,
    scale: float,
    shift_rc: Tuple[float, float],
) -> Tuple[np.ndarray, np.ndarray]:
    """Rotate about the frame center, zoom, then shift, as one resampling.

    Bilinear interpolation with zero fill; the mask goes through the same
    map and a pixel stays valid only if it was fully covered by valid area.
    """
    h, w = intensity.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    theta = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    # affine_transform maps output coords back to input: inverse of
    # shift(zoom(rotate(x))) is rot^T applied to (y - t - c)/s, plus c.
    m = _snap(rot.T / scale)
    offset = center - m @ (center + np.asarray(shift_rc, dtype=np.float64))
    offset = _snap(offset)
    out = ndimage.affine_transform(
        intensity.astype(np.float32), m, offset=offset, order=1, mode="constant", cval=0.0,
        output=np.float32)
    mask_f = ndimage.affine_transform(
        mask.astype(np.float32), m, offset=offset, order=1, mode="constant", cval=0.0,
        output=np.float32)
    new_mask = mask_f >= MASK_VALID_THRESHOLD
    out[~new_mask] = 0.0
    np.maximum(out, 0.0, out=out)
    return out, new_mask


def _random_rectangles(shape, config: AugmentConfig, rng: np.random.Generator):
    h, w = shape
    count = int(rng.integers(config.mask_count_range[0], config.mask_count_range[1] + 1))
    rects = []
    for _ in range(count):
        area = rng.uniform(*config.mask_area_range) * h * w
        aspect = rng.uniform(0.5, 2.0)
        rh = int(np.clip(np.sqrt(area * aspect), 1, h))
        rw = int(np.clip(np.sqrt(area / aspect), 1, w))
        r0 = int(rng.integers(0, h - rh + 1))
        c0 = int(rng.integers(0, w - rw + 1))
        rects.append((r0, c0, rh, rw))
    return rects


def augment_arrays(
    intensity: np.ndarray,
    mask: np.ndarray,
    config: AugmentConfig,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    config.validate()
    angle = float(rng.uniform(*config.rotation_range)) if config.rotate else 0.0
    scale = float(rng.uniform(*config.zoom_range)) if config.zoom else 1.0
    if config.shift:
        shift_rc = tuple(int(v) for v in rng.integers(-config.shift_max, config.shift_max + 1, 2))
    else:
        shift_rc = (0, 0)
    if config.rotate or config.zoom or config.shift:
        out, out_mask = geometric_transform(intensity, mask, angle, scale, shift_rc)
    else:
        out, out_mask = intensity.astype(np.float32).copy(), mask.copy()
    if config.masking:
        for r0, c0, rh, rw in _random_rectangles(out.shape, config, rng):
            out[r0:r0 + rh, c0:c0 + rw] = 0.0
            out_mask[r0:r0 + rh, c0:c0 + rw] = False
    return out, out_mask


def augment_frame(
    frame: np.ndarray,
    mask: np.ndarray,
    record: FrameRecord,
    config: AugmentConfig,
    rng: np.random.Generator,
    copy_index: int,
) -> Tuple[np.ndarray, np.ndarray, FrameRecord]:
    """One augmented copy; the new record keeps label and sample provenance
    and points its lineage at the source frame."""
    out, out_mask = augment_arrays(frame, mask, config, rng)
    new_record = replace(
        record,
        frame_id=f"{record.frame_id}.aug{copy_index:03d}",
        lineage=record.lineage,
    )
    return out, out_mask, new_record


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.5
    val_fraction: float = 0.25
    test_fraction: float = 0.25
    seed: int = 0

    @property
    def fractions(self) -> Tuple[float, float, float]:
        return (self.train_fraction, self.val_fraction, self.test_fraction)

    def validate(self) -> None:
        if any(f < 0 for f in self.fractions):
            raise ValueError(f"split fractions must be >= 0, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {self.fractions}")


def _allocate(n: int, fractions: Sequence[float]) -> List[int]:
    """Largest-remainder allocation; every nonzero fraction gets at least one."""
    raw = [f * n for f in fractions]
    base = [int(np.floor(r)) for r in raw]
    leftover = n - sum(base)
    order = np.argsort([-(r - b) for r, b in zip(raw, base)], kind="stable")
    for k in range(leftover):
        base[order[k]] += 1
    active = [i for i, f in enumerate(fractions) if f > 0]
    for i in active:
        while base[i] == 0:
            donor = int(np.argmax(base))
            base[donor] -= 1
            base[i] += 1
    return base


def split_dataset(
    dataset: SpeckleDataset, spec: SplitSpec
) -> Tuple[SpeckleDataset, SpeckleDataset, SpeckleDataset]:
    """Partition source frames into train/val/test, stratified by (sample_id, label)."""
    spec.validate()
    augmented = [r.frame_id for r in dataset.records if r.frame_id != r.lineage]
    if augmented:
        raise LeakageError(
            f"split must run on source frames only; found augmented records {augmented[:5]}")
    strata: Dict[Tuple[str, str], List[int]] = {}
    for i, r in enumerate(dataset.records):
        strata.setdefault((r.sample_id, r.label), []).append(i)
    n_active = sum(1 for f in spec.fractions if f > 0)
    too_small = sorted(k for k, idx in strata.items() if len(idx) < n_active)
    if too_small:
        raise ValueError(
            f"strata too small to cover all {n_active} splits: {too_small}; "
            f"need at least {n_active} frames per (sample_id, label)")
    rng = np.random.default_rng(spec.seed)
    buckets: Tuple[List[int], List[int], List[int]] = ([], [], [])
    for key in sorted(strata):
        idx = np.array(strata[key])
        rng.shuffle(idx)
        counts = _allocate(len(idx), spec.fractions)
        start = 0
        for b, count in enumerate(counts):
            buckets[b].extend(idx[start:start + count].tolist())
            start += count
    return tuple(dataset.subset(sorted(b)) for b in buckets)


def expand_split(
    split: SpeckleDataset,
    per_class_budget: int,
    config: AugmentConfig,
    seed: int,
    classes: Optional[Sequence[str]] = None,
) -> SpeckleDataset:
    """Augment each class up to exactly per_class_budget records.

    Copies are spread evenly over the class's source frames; each copy draws
    from a counter-derived stream keyed by (seed, source index, copy index),
    so expansion order never affects the output.
    """
    config.validate()
    present: Dict[str, List[int]] = {}
    for i, r in enumerate(split.records):
        present.setdefault(r.label, []).append(i)
    for cls in classes or []:
        if cls not in present or not present[cls]:
            raise ValueError(f"class {cls!r} has no records in this split; cannot expand")
    frames: List[np.ndarray] = []
    masks: List[np.ndarray] = []
    records: List[FrameRecord] = []
    for cls in sorted(present):
        indices = present[cls]
        n = len(indices)
        if per_class_budget < n:
            raise ValueError(
                f"per_class_budget {per_class_budget} is below the {n} source frames of class {cls!r}")
        extra = per_class_budget - n
        copies_each = [extra // n + (1 if k < extra % n else 0) for k in range(n)]
        for local_k, src_index in enumerate(indices):
            frames.append(split.frames[src_index].copy())
            masks.append(split.masks[src_index].copy())
            records.append(split.records[src_index])
            for copy_index in range(copies_each[local_k]):
                rng = np.random.default_rng([seed, AUGMENT_STREAM, src_index, copy_index])
                out, out_mask, rec = augment_frame(
                    split.frames[src_index], split.masks[src_index],
                    split.records[src_index], config, rng, copy_index)
                frames.append(out)
                masks.append(out_mask)
                records.append(rec)
    return SpeckleDataset(
        frames=np.stack(frames), masks=np.stack(masks), records=records,
        geometry=split.geometry, seed=split.seed)


def audit_leakage(datasets: Sequence[SpeckleDataset], names: Optional[Sequence[str]] = None) -> None:
    """Raise if any two datasets share a source frame (directly or via lineage)."""
    names = list(names or (f"split{i}" for i in range(len(datasets))))
    sources = [{r.lineage for r in ds.records} for ds in datasets]
    for i in range(len(datasets)):
        for j in range(i + 1, len(datasets)):
            shared = sources[i] & sources[j]
            if shared:
                raise LeakageError(
                    f"{names[i]} and {names[j]} share {len(shared)} source frames, "
                    f"e.g. {sorted(shared)[:5]}")


def write_split_ids(path, splits: Dict[str, SpeckleDataset]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, ds in splits.items():
        (path / f"{name}.ids").write_text(
            "".join(r.frame_id + "\n" for r in ds.records))


def read_split_ids(path, name: str) -> List[str]:
    return (Path(path) / f"{name}.ids").read_text().split()
