"""Request and response bodies for the HTTP API."""

from __future__ import annotations

from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field


class IngestRequest(BaseModel):
    """One 96x96 frame. image_b64 is little-endian float32 bytes in base64;
    image is nested lists. Exactly one of the two must be given."""

    image_b64: Optional[str] = None
    image: Optional[List[List[float]]] = None
    mask_b64: Optional[str] = None


class IngestResponse(BaseModel):
    frame_id: int
    state: str


class FrameOut(BaseModel):
    frame_id: int
    state: str
    label: Optional[str] = None
    created_at: float
    labeled_at: Optional[float] = None
    classified_at: Optional[float] = None
    predicted_label: Optional[str] = None


class LabelRequest(BaseModel):
    frame_id: int
    label: str


class LabelResponse(BaseModel):
    frame_id: int
    state: str
    label: str
    retrain_triggered: bool
    support_version: int
    previous_labels: List[str] = Field(default_factory=list)


class ClassifyRequest(BaseModel):
    frame_id: int


class ClassificationOut(BaseModel):
    frame_id: int
    predicted_label: str
    mean_distances: Dict[str, float]
    tie: bool
    model_version: int
    support_version: int
    timestamp: float


class SupportClassOut(BaseModel):
    label: str
    frame_ids: List[int]
    pinned: List[int]


class SupportsOut(BaseModel):
    support_version: int
    shots: int
    classes: List[SupportClassOut]


class PinRequest(BaseModel):
    """Replaces the pinned set; an empty list clears all pins."""

    frame_ids: List[int]


class RetrainResponse(BaseModel):
    started: bool
    completed: bool
    skipped_reason: Optional[str] = None
    model_version: int


class StatusOut(BaseModel):
    model_version: int
    support_version: int
    n_frames: int
    n_labeled: int
    n_classified: int
    labels_per_class: Dict[str, int]
    new_labels_since_retrain: Dict[str, int]
    retrain_after: int
    retrain_state: str
    supports_ready: bool
    throughput_fps: float
