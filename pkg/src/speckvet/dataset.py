"""On-disk dataset format and the in-memory bundle that training consumes.

A dataset directory holds manifest.json (geometry, seed, one metadata record
per frame), frames.f32 (little-endian float32, N x H x W), and masks.u1
(uint8 booleans, same order). Bytes are a pure function of the build inputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .simulate import DetectorGeometry, SpecklePattern

FORMAT_MARKER = "speckvet-dataset"
FORMAT_VERSION = 1


class DatasetError(Exception):
    """Raised when a dataset directory is missing pieces or inconsistent."""


@dataclass
class FrameRecord:
    label: str
    hit_multiplicity: int
    sample_id: str
    fluence_factor: float
    rng_key: List[int] = field(default_factory=list)
    # frame_id is unique per record; lineage names the pre-augmentation
    # source frame and equals frame_id for unaugmented records.
    frame_id: str = ""
    lineage: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FrameRecord":
        return cls(**d)


@dataclass
class SpeckleDataset:
    frames: np.ndarray
    masks: np.ndarray
    records: List[FrameRecord]
    geometry: DetectorGeometry
    seed: int

    def __post_init__(self):
        n = len(self.records)
        if self.frames.shape[0] != n or self.masks.shape[0] != n:
            raise DatasetError(
                f"{n} records but {self.frames.shape[0]} frames and {self.masks.shape[0]} masks")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> List[str]:
        return [r.label for r in self.records]

    @property
    def sample_ids(self) -> List[str]:
        return [r.sample_id for r in self.records]

    def subset(self, indices: Sequence[int]) -> "SpeckleDataset":
        idx = np.asarray(indices, dtype=int)
        return SpeckleDataset(
            frames=self.frames[idx].copy(),
            masks=self.masks[idx].copy(),
            records=[self.records[i] for i in idx],
            geometry=self.geometry,
            seed=self.seed,
        )

    @classmethod
    def from_patterns(
        cls,
        patterns: Sequence[SpecklePattern],
        geometry: Optional[DetectorGeometry] = None,
        seed: int = 0,
    ) -> "SpeckleDataset":
        geometry = geometry or DetectorGeometry()
        frames = np.stack([p.intensity for p in patterns]).astype(np.float32)
        masks = np.stack([p.mask for p in patterns])
        records = [
            FrameRecord(
                label=p.label, hit_multiplicity=p.hit_multiplicity, sample_id=p.sample_id,
                fluence_factor=p.fluence_factor, rng_key=list(p.rng_key),
                frame_id=f"src_{i:06d}", lineage=f"src_{i:06d}")
            for i, p in enumerate(patterns)
        ]
        return cls(frames=frames, masks=masks, records=records, geometry=geometry, seed=seed)

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format": FORMAT_MARKER,
            "format_version": FORMAT_VERSION,
            "seed": self.seed,
            "geometry": self.geometry.to_dict(),
            "n_frames": len(self),
            "frame_shape": list(self.frames.shape[1:]),
            "records": [r.to_dict() for r in self.records],
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
        np.ascontiguousarray(self.frames, dtype="<f4").tofile(path / "frames.f32")
        self.masks.astype(np.uint8).tofile(path / "masks.u1")

    @classmethod
    def load(cls, path) -> "SpeckleDataset":
        path = Path(path)
        manifest_path = path / "manifest.json"
        if not manifest_path.exists():
            raise DatasetError(f"{path} has no manifest.json; not a dataset directory")
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("format") != FORMAT_MARKER:
            raise DatasetError(f"{manifest_path} is not a {FORMAT_MARKER} manifest")
        if manifest.get("format_version") != FORMAT_VERSION:
            raise DatasetError(
                f"{manifest_path}: format_version {manifest.get('format_version')} unsupported")
        n = manifest["n_frames"]
        h, w = manifest["frame_shape"]
        frames = np.fromfile(path / "frames.f32", dtype="<f4")
        if frames.size != n * h * w:
            raise DatasetError(
                f"frames.f32 holds {frames.size} values, manifest expects {n * h * w}; truncated?")
        masks = np.fromfile(path / "masks.u1", dtype=np.uint8)
        if masks.size != n * h * w:
            raise DatasetError(
                f"masks.u1 holds {masks.size} values, manifest expects {n * h * w}; truncated?")
        return cls(
            frames=frames.reshape(n, h, w),
            masks=masks.reshape(n, h, w).astype(bool),
            records=[FrameRecord.from_dict(d) for d in manifest["records"]],
            geometry=DetectorGeometry(**manifest["geometry"]),
            seed=manifest["seed"],
        )
