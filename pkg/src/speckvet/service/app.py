"""HTTP layer: routes, payload codecs, SSE stream."""

from __future__ import annotations

import base64
import io
import json
import time
from typing import Optional

import numpy as np
from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse, Response, StreamingResponse
from PIL import Image

from ..model import EmbeddingNet
from .schemas import (
    ClassificationOut,
    ClassifyRequest,
    FrameOut,
    IngestRequest,
    IngestResponse,
    LabelRequest,
    LabelResponse,
    PinRequest,
    RetrainResponse,
    StatusOut,
    SupportClassOut,
    SupportsOut,
)
from .state import ServiceConfig, ServiceState, StateError

STREAM_POLL_S = 0.5


def decode_frame(body: IngestRequest, size: int) -> tuple:
    """(image, mask) from either base64 float32 bytes or nested lists."""
    if (body.image_b64 is None) == (body.image is None):
        raise StateError("provide exactly one of image_b64 or image", 422)
    if body.image_b64 is not None:
        raw = base64.b64decode(body.image_b64)
        if len(raw) != size * size * 4:
            raise StateError(
                f"image_b64 must decode to {size * size * 4} bytes, got {len(raw)}", 422)
        image = np.frombuffer(raw, dtype="<f4").reshape(size, size)
    else:
        image = np.asarray(body.image, dtype=np.float32)
    mask = None
    if body.mask_b64 is not None:
        raw = base64.b64decode(body.mask_b64)
        if len(raw) != size * size:
            raise StateError(
                f"mask_b64 must decode to {size * size} bytes, got {len(raw)}", 422)
        mask = np.frombuffer(raw, dtype=np.uint8).reshape(size, size) != 0
    return image, mask


def frame_png(image: np.ndarray) -> bytes:
    """8-bit log-scaled preview; raw floats never leave the service."""
    v = np.log1p(np.clip(image.astype(np.float64), 0.0, None))
    peak = v.max()
    if peak > 0:
        v = v / peak
    buf = io.BytesIO()
    Image.fromarray((v * 255.0).round().astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def _frame_out(frame) -> FrameOut:
    return FrameOut(
        frame_id=frame.frame_id, state=frame.state, label=frame.label,
        created_at=frame.created_at, labeled_at=frame.labeled_at,
        classified_at=frame.classified_at, predicted_label=frame.predicted_label)


def create_app(config: ServiceConfig, model: Optional[EmbeddingNet] = None,
               state: Optional[ServiceState] = None) -> FastAPI:
    state = state or ServiceState(config, model=model)
    app = FastAPI(title="speckle classification service")
    app.state.service = state

    @app.exception_handler(StateError)
    async def _state_error(request: Request, exc: StateError):
        return JSONResponse(status_code=exc.status_code, content={"detail": str(exc)})

    @app.get("/api/frames", response_model=list[FrameOut])
    def list_frames(state_filter: Optional[str] = Query(default=None, alias="state")):
        return [_frame_out(f) for f in state.list_frames(state_filter)]

    @app.post("/api/frames", response_model=IngestResponse)
    def ingest(body: IngestRequest):
        image, mask = decode_frame(body, state.config.frame_size)
        frame = state.ingest(image, mask)
        return IngestResponse(frame_id=frame.frame_id, state=frame.state)

    @app.get("/api/frames/{frame_id}/image")
    def frame_image(frame_id: int):
        frame = state.get_frame(frame_id)
        return Response(content=frame_png(frame.image), media_type="image/png")

    @app.post("/api/labels", response_model=LabelResponse)
    def post_label(body: LabelRequest):
        frame, triggered = state.label_frame(body.frame_id, body.label)
        return LabelResponse(
            frame_id=frame.frame_id, state=frame.state, label=frame.label,
            retrain_triggered=triggered,
            support_version=state.snapshot.support_version,
            previous_labels=[lab for _, lab in frame.label_history])

    @app.get("/api/supports", response_model=SupportsOut)
    def get_supports():
        version, table = state.support_table()
        return SupportsOut(
            support_version=version, shots=state.config.shots,
            classes=[
                SupportClassOut(label=cls, frame_ids=row["frame_ids"],
                                pinned=row["pinned"])
                for cls, row in table.items()
            ])

    @app.post("/api/supports/pin", response_model=SupportsOut)
    def pin(body: PinRequest):
        state.pin_supports(body.frame_ids)
        return get_supports()

    @app.post("/api/classify", response_model=ClassificationOut)
    def post_classify(body: ClassifyRequest):
        frame, result, snap, ts = state.classify_frame(body.frame_id)
        return ClassificationOut(
            frame_id=frame.frame_id,
            predicted_label=result.predicted_label,
            mean_distances=dict(result.mean_distances),
            tie=result.tie,
            model_version=snap.model_version,
            support_version=snap.support_version,
            timestamp=ts)

    @app.get("/api/stream")
    def stream(follow: bool = Query(default=True), timeout_s: float = Query(default=30.0)):
        def generate():
            seq = 0
            deadline = time.time() + timeout_s
            while True:
                events = state.events_since(seq)
                if events:
                    seq = events[-1]["seq"] + 1
                    for event in events:
                        if event["type"] != "classification":
                            continue
                        yield f"data: {json.dumps(event)}\n\n"
                if not follow:
                    return
                if time.time() >= deadline:
                    return
                state.wait_for_event(seq, timeout=STREAM_POLL_S)

        return StreamingResponse(generate(), media_type="text/event-stream")

    @app.post("/api/retrain", response_model=RetrainResponse)
    def retrain(from_scratch: bool = Query(default=False)):
        started, skip_reason = state.start_retrain(from_scratch=from_scratch)
        completed = state.config.retrain_mode == "inline" and started
        return RetrainResponse(
            started=started,
            completed=completed,
            skipped_reason=skip_reason if completed else None,
            model_version=state.snapshot.model_version)

    @app.get("/api/status", response_model=StatusOut)
    def status():
        return StatusOut(**state.status())

    return app
