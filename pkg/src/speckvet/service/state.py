"""In-memory service state: frames, labels, snapshots, online retraining.

Classification readers grab an immutable Snapshot reference and never block
on retraining; mutation happens under one lock and snapshot replacement is
a single reference assignment.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..checkpoint import load_checkpoint
from ..dataset import FrameRecord, SpeckleDataset
from ..fewshot import ClassificationResult, SupportSet, build_support_set, classify
from ..model import EmbeddingNet, embed_one
from ..optim import init_adam
from ..pipeline import AugmentConfig, expand_split
from ..simulate import MULTI_HIT, NON_SAMPLE_HIT, SINGLE_HIT, DetectorGeometry
from ..train import train_epoch
from ..triplet import TrainerConfig

UNLABELED = "unlabeled"
LABELED = "labeled"
CLASSIFIED = "classified"

DEFAULT_LABEL_SET = (SINGLE_HIT, MULTI_HIT, NON_SAMPLE_HIT)
THROUGHPUT_WINDOW_S = 10.0


@dataclass
class ServiceConfig:
    checkpoint_path: Optional[str] = None
    shots: int = 5
    label_set: Tuple[str, ...] = DEFAULT_LABEL_SET
    retrain_after: int = 40
    host: str = "127.0.0.1"
    port: int = 8421
    spool_dir: Optional[str] = None
    frame_size: int = 96
    retrain_mode: str = "thread"  # "inline" runs the fine-tune in-request
    online_epochs: int = 3
    online_batch: int = 32
    augment_copies: int = 3
    margin: float = 1.0
    triplets_per_batch: int = 64
    learning_rate: float = 1e-3
    seed: int = 0

    def validate(self) -> None:
        if self.shots < 1:
            raise ValueError("shots must be at least 1")
        if not self.label_set:
            raise ValueError("label_set must be non-empty")
        if len(set(self.label_set)) != len(self.label_set):
            raise ValueError("label_set entries must be unique")
        if self.retrain_after < 1:
            raise ValueError("retrain_after must be at least 1")
        if self.retrain_mode not in ("thread", "inline"):
            raise ValueError(f"retrain_mode must be thread or inline, got {self.retrain_mode!r}")
        if self.online_epochs < 1 or self.online_batch < 2:
            raise ValueError("online_epochs must be >= 1 and online_batch >= 2")
        if self.augment_copies < 0:
            raise ValueError("augment_copies must be nonnegative")


@dataclass
class ServedFrame:
    frame_id: int
    image: np.ndarray
    mask: np.ndarray
    state: str = UNLABELED
    label: Optional[str] = None
    label_history: List[Tuple[float, str]] = field(default_factory=list)
    created_at: float = 0.0
    labeled_at: Optional[float] = None
    classified_at: Optional[float] = None
    predicted_label: Optional[str] = None


@dataclass(frozen=True)
class Snapshot:
    """What a classification is computed against; replaced, never mutated."""

    model: EmbeddingNet
    support: Optional[SupportSet]
    model_version: int
    support_version: int


class StateError(Exception):
    """Request conflicts with the frame or service state."""

    def __init__(self, message: str, status_code: int = 409):
        super().__init__(message)
        self.status_code = status_code


def _clone_model(model: EmbeddingNet) -> EmbeddingNet:
    twin = type(model).from_config(model.config_dict())
    params = twin.named_parameters()
    for name, param in model.named_parameters().items():
        params[name].data[...] = param.data
    for name, buf in model.named_buffers().items():
        twin.set_buffer(name, buf.copy())
    return twin


class ServiceState:
    def __init__(self, config: ServiceConfig, model: Optional[EmbeddingNet] = None):
        config.validate()
        self.config = config
        if model is None:
            if not config.checkpoint_path:
                raise ValueError("need a model instance or a checkpoint_path")
            model = load_checkpoint(config.checkpoint_path)
        self._lock = threading.Lock()
        self.snapshot = Snapshot(
            model=model, support=None, model_version=1, support_version=0)
        self.frames: Dict[int, ServedFrame] = {}
        self._next_frame_id = 0
        self.pinned: List[int] = []
        self.new_labels_since_retrain: Dict[str, int] = {c: 0 for c in config.label_set}
        self.retrain_count = 0
        self.retrain_state = "idle"
        self.last_skip_reason: Optional[str] = None
        self.events: List[dict] = []
        self._event_cond = threading.Condition(self._lock)
        self._classify_times: deque = deque(maxlen=1024)
        self._retrain_thread: Optional[threading.Thread] = None

    # -- event log ----------------------------------------------------------

    def _append_event(self, kind: str, payload: dict) -> dict:
        event = {"seq": len(self.events), "type": kind, **payload}
        self.events.append(event)
        self._event_cond.notify_all()
        return event

    def events_since(self, seq: int, kinds: Optional[Sequence[str]] = None) -> List[dict]:
        with self._lock:
            out = self.events[seq:]
        if kinds is not None:
            out = [e for e in out if e["type"] in kinds]
        return out

    def wait_for_event(self, seq: int, timeout: float) -> bool:
        """True once any event with index >= seq exists."""
        with self._event_cond:
            return self._event_cond.wait_for(
                lambda: len(self.events) > seq, timeout=timeout)

    # -- frames -------------------------------------------------------------

    def ingest(self, image: np.ndarray, mask: Optional[np.ndarray] = None) -> ServedFrame:
        size = self.config.frame_size
        image = np.asarray(image, dtype=np.float32)
        if image.shape != (size, size):
            raise StateError(
                f"expected a ({size},{size}) frame, got {image.shape}", 422)
        if mask is None:
            mask = np.ones((size, size), dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (size, size):
            raise StateError(f"mask shape {mask.shape} does not match", 422)
        with self._lock:
            frame = ServedFrame(
                frame_id=self._next_frame_id, image=image, mask=mask,
                created_at=time.time())
            self._next_frame_id += 1
            self.frames[frame.frame_id] = frame
            self._append_event("ingest", {"frame_id": frame.frame_id})
            return frame

    def get_frame(self, frame_id: int) -> ServedFrame:
        frame = self.frames.get(frame_id)
        if frame is None:
            raise StateError(f"unknown frame_id {frame_id}", 404)
        return frame

    def list_frames(self, state: Optional[str] = None) -> List[ServedFrame]:
        with self._lock:
            frames = [self.frames[k] for k in sorted(self.frames)]
        if state is not None:
            frames = [f for f in frames if f.state == state]
        return frames

    # -- labeling and supports ----------------------------------------------

    def label_frame(self, frame_id: int, label: str) -> Tuple[ServedFrame, bool]:
        """Record a label; returns (frame, retrain_triggered)."""
        if label not in self.config.label_set:
            raise StateError(
                f"label {label!r} not in label set {list(self.config.label_set)}", 422)
        with self._lock:
            frame = self.get_frame(frame_id)
            now = time.time()
            if frame.label is not None:
                frame.label_history.append((frame.labeled_at, frame.label))
            frame.label = label
            frame.labeled_at = now
            frame.state = LABELED
            self.new_labels_since_retrain[label] = (
                self.new_labels_since_retrain.get(label, 0) + 1)
            self._rebuild_support_locked()
            triggered = all(
                self.new_labels_since_retrain.get(c, 0) >= self.config.retrain_after
                for c in self.config.label_set)
            self._append_event("label", {"frame_id": frame_id, "label": label})
        if triggered:
            self.start_retrain()
        return frame, triggered

    def pin_supports(self, frame_ids: Sequence[int]) -> None:
        with self._lock:
            for fid in frame_ids:
                frame = self.get_frame(fid)
                if frame.label is None:
                    raise StateError(f"frame {fid} is not labeled; cannot pin", 409)
            self.pinned = list(dict.fromkeys(int(f) for f in frame_ids))
            self._rebuild_support_locked()

    def _support_choice_locked(self) -> Dict[str, List[int]]:
        """Per class: pinned frames first, then most recently labeled."""
        choice: Dict[str, List[int]] = {}
        labeled = [f for f in self.frames.values() if f.label is not None]
        for cls in self.config.label_set:
            of_class = [f for f in labeled if f.label == cls]
            if not of_class:
                continue
            pinned = [fid for fid in self.pinned
                      if self.frames[fid].label == cls]
            rest = sorted(
                (f for f in of_class if f.frame_id not in set(pinned)),
                key=lambda f: (f.labeled_at, f.frame_id), reverse=True)
            take = pinned + [f.frame_id for f in rest]
            choice[cls] = take[:self.config.shots]
        return choice

    def _rebuild_support_locked(self) -> None:
        choice = self._support_choice_locked()
        snap = self.snapshot
        if not choice:
            self.snapshot = replace(
                snap, support=None, support_version=snap.support_version + 1)
            return
        frames, labels, ids = [], [], []
        for cls, fids in choice.items():
            for fid in fids:
                frames.append(self.frames[fid].image)
                labels.append(cls)
                ids.append(str(fid))
        support = build_support_set(
            snap.model, np.stack(frames), labels, source_ids=ids)
        self.snapshot = replace(
            snap, support=support, support_version=snap.support_version + 1)

    def support_table(self) -> Tuple[int, Dict[str, dict]]:
        with self._lock:
            snap = self.snapshot
            choice = self._support_choice_locked()
            pinned = set(self.pinned)
        table = {
            cls: {"frame_ids": fids,
                  "pinned": [f for f in fids if f in pinned]}
            for cls, fids in choice.items()
        }
        return snap.support_version, table

    # -- classification -----------------------------------------------------

    def classify_frame(self, frame_id: int) -> Tuple[ServedFrame, ClassificationResult, Snapshot, float]:
        with self._lock:
            frame = self.get_frame(frame_id)
            if frame.state == LABELED:
                raise StateError(
                    f"frame {frame_id} is already labeled; classification "
                    "would be shadowed by ground truth", 409)
            snap = self.snapshot
        if snap.support is None:
            raise StateError("support set is empty; label frames first", 409)
        result = classify(embed_one(snap.model, frame.image), snap.support)
        now = time.time()
        with self._lock:
            if frame.state == UNLABELED:
                frame.state = CLASSIFIED
            frame.classified_at = now
            frame.predicted_label = result.predicted_label
            self._classify_times.append(now)
            self._append_event("classification", {
                "frame_id": frame_id,
                "predicted_label": result.predicted_label,
                "mean_distances": dict(result.mean_distances),
                "tie": result.tie,
                "model_version": snap.model_version,
                "support_version": snap.support_version,
                "timestamp": now,
            })
        return frame, result, snap, now

    def throughput_fps(self) -> float:
        cutoff = time.time() - THROUGHPUT_WINDOW_S
        recent = [t for t in self._classify_times if t >= cutoff]
        return len(recent) / THROUGHPUT_WINDOW_S

    # -- online retraining ----------------------------------------------------

    def labeled_dataset(self) -> Optional[SpeckleDataset]:
        """The labeled spool as a standard dataset (pre-augmentation)."""
        with self._lock:
            labeled = [self.frames[k] for k in sorted(self.frames)
                       if self.frames[k].label is not None]
        if not labeled:
            return None
        multiplicity = {SINGLE_HIT: 1, MULTI_HIT: 2}
        records = [
            FrameRecord(
                label=f.label, hit_multiplicity=multiplicity.get(f.label, 0),
                sample_id=f"frame_{f.frame_id:06d}", fluence_factor=1.0,
                frame_id=f"src_{i:06d}", lineage=f"src_{i:06d}")
            for i, f in enumerate(labeled)
        ]
        return SpeckleDataset(
            frames=np.stack([f.image for f in labeled]),
            masks=np.stack([f.mask for f in labeled]),
            records=records, geometry=DetectorGeometry(), seed=self.config.seed)

    def start_retrain(self, from_scratch: bool = False) -> Tuple[bool, Optional[str]]:
        """Kick off a fine-tune; returns (started, skip_reason)."""
        with self._lock:
            if self.retrain_state == "running":
                return False, "retrain already running"
            self.retrain_state = "running"
        if self.config.retrain_mode == "inline":
            self._retrain(from_scratch)
            return True, self.last_skip_reason
        thread = threading.Thread(
            target=self._retrain, args=(from_scratch,), daemon=True)
        self._retrain_thread = thread
        thread.start()
        return True, None

    def wait_for_retrain(self, timeout: float = 60.0) -> None:
        thread = self._retrain_thread
        if thread is not None:
            thread.join(timeout)

    def _retrain(self, from_scratch: bool) -> None:
        try:
            spool = self.labeled_dataset()
            reason = None
            if spool is None:
                reason = "no labeled frames"
            else:
                classes = sorted(set(spool.labels))
                if len(classes) < 2:
                    reason = "need labeled frames from at least 2 classes"
            if reason is not None:
                self.last_skip_reason = reason
                with self._lock:
                    self._append_event("retrain_skipped", {"reason": reason})
                return
            self.last_skip_reason = None
            self._save_spool(spool)
            counts = {c: spool.labels.count(c) for c in set(spool.labels)}
            budget = max(counts.values()) * (1 + self.config.augment_copies)
            expanded = expand_split(
                spool, budget, AugmentConfig(),
                seed=self.config.seed + self.retrain_count)
            snap = self.snapshot
            if from_scratch:
                model = type(snap.model).from_config(snap.model.config_dict())
            else:
                model = _clone_model(snap.model)
            trainer = TrainerConfig(
                margin=self.config.margin,
                batch_size=min(self.config.online_batch, len(expanded)),
                epochs=self.config.online_epochs,
                triplets_per_batch=self.config.triplets_per_batch,
                seed=self.config.seed + self.retrain_count)
            adam = init_adam(model.named_parameters(),
                             learning_rate=self.config.learning_rate)
            for epoch in range(trainer.epochs):
                train_epoch(model, expanded, trainer, adam, epoch)
            with self._lock:
                old = self.snapshot
                self.snapshot = Snapshot(
                    model=model, support=old.support,
                    model_version=old.model_version + 1,
                    support_version=old.support_version)
                self._rebuild_support_locked()
                self.retrain_count += 1
                self.new_labels_since_retrain = {
                    c: 0 for c in self.config.label_set}
                self._append_event("swap", {
                    "model_version": self.snapshot.model_version,
                    "support_version": self.snapshot.support_version,
                })
        finally:
            self.retrain_state = "idle"

    def _save_spool(self, spool: SpeckleDataset) -> None:
        if self.config.spool_dir:
            spool.save(Path(self.config.spool_dir) / "labeled")

    # -- status ---------------------------------------------------------------

    def status(self) -> dict:
        with self._lock:
            frames = list(self.frames.values())
            snap = self.snapshot
            per_class = {c: 0 for c in self.config.label_set}
            for f in frames:
                if f.label is not None:
                    per_class[f.label] = per_class.get(f.label, 0) + 1
            return {
                "model_version": snap.model_version,
                "support_version": snap.support_version,
                "n_frames": len(frames),
                "n_labeled": sum(1 for f in frames if f.label is not None),
                "n_classified": sum(1 for f in frames if f.state == CLASSIFIED),
                "labels_per_class": per_class,
                "new_labels_since_retrain": dict(self.new_labels_since_retrain),
                "retrain_after": self.config.retrain_after,
                "retrain_state": self.retrain_state,
                "supports_ready": snap.support is not None,
                "throughput_fps": self.throughput_fps(),
            }
