"""HTTP facade over the session engine.

Single-process, in-memory sessions; model weights load once at startup
and are shared read-only across requests. Coordinates on the wire are
normalized [0, 1]; every error response carries a stable machine-readable
code from ERROR_CODES.
"""

from __future__ import annotations

import io
import threading
import time
import uuid

import numpy as np
from fastapi import FastAPI, Query, Request, UploadFile
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError

from .geometry import Box, Point
from .model import (
    CountingModel,
    CountResult,
    ImageInput,
    ImageSizeError,
    NoPositivePromptError,
)
from . import session as engine

ERROR_CODES = (
    "unsupported_media",
    "too_large",
    "unknown_session",
    "unknown_reference",
    "unknown_round",
    "no_positive_prompt",
    "geometry_out_of_bounds",
    "would_leave_no_positive",
    "no_rounds_yet",
    "invalid_threshold",
    "image_size_out_of_range",
    "invalid_request",
)

DEFAULT_IDLE_TIMEOUT_S = 30 * 60
DEFAULT_MAX_UPLOAD_BYTES = 8 * 1024 * 1024


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        assert code in ERROR_CODES
        self.status = status
        self.code = code
        self.message = message


class SessionEntry:
    def __init__(self, session: engine.Session):
        self.session = session
        self.references: dict[str, ImageInput] = {}
        self.last_access = time.time()


def _decode_upload(data: bytes, max_bytes: int) -> ImageInput:
    if len(data) > max_bytes:
        raise ApiError(413, "too_large", f"upload exceeds {max_bytes} bytes")
    try:
        pil = Image.open(io.BytesIO(data))
        if pil.format not in ("PNG", "JPEG"):
            raise ApiError(
                400, "unsupported_media", f"unsupported format {pil.format}"
            )
        arr = np.asarray(pil.convert("RGB"))
    except UnidentifiedImageError:
        raise ApiError(400, "unsupported_media", "not a decodable image")
    try:
        return ImageInput.from_array(arr)
    except ImageSizeError as e:
        raise ApiError(422, "image_size_out_of_range", str(e))


def _parse_geometry(payload: dict) -> Box | Point:
    kind = payload.get("type")
    coords = payload.get("coords")
    try:
        if kind == "box":
            x0, y0, x1, y1 = coords
            return Box(x0, y0, x1, y1)
        if kind == "point":
            x, y = coords
            return Point(x, y)
    except (TypeError, ValueError) as e:
        raise ApiError(422, "geometry_out_of_bounds", str(e))
    raise ApiError(422, "invalid_request", f"unknown geometry type {kind!r}")


def _result_body(result: CountResult, all_detections=None) -> dict:
    dets = [
        {"box": [b.x_min, b.y_min, b.x_max, b.y_max], "score": s}
        for b, s in zip(result.boxes, result.scores)
    ]
    body = {
        "round": result.round_number,
        "count": result.count,
        "detections": dets,
        "threshold": result.threshold,
    }
    if all_detections is not None:
        body["all_detections"] = all_detections
    return body


def create_app(
    model: CountingModel,
    default_threshold: float | None = None,
    max_upload_bytes: int = DEFAULT_MAX_UPLOAD_BYTES,
    idle_timeout_s: float = DEFAULT_IDLE_TIMEOUT_S,
    cors_origin: str | None = None,
    debug_endpoints: bool = True,
) -> FastAPI:
    app = FastAPI(title="promptcount")
    sessions: dict[str, SessionEntry] = {}
    store_lock = threading.Lock()

    if cors_origin:
        from fastapi.middleware.cors import CORSMiddleware

        app.add_middleware(
            CORSMiddleware,
            allow_origins=[cors_origin] if cors_origin != "*" else ["*"],
            allow_methods=["*"],
            allow_headers=["*"],
        )

    @app.exception_handler(ApiError)
    async def handle_api_error(request: Request, exc: ApiError):
        return JSONResponse(
            status_code=exc.status,
            content={"code": exc.code, "message": exc.message},
        )

    def get_entry(session_id: str) -> SessionEntry:
        with store_lock:
            now = time.time()
            stale = [
                sid
                for sid, e in sessions.items()
                if now - e.last_access > idle_timeout_s
            ]
            for sid in stale:
                del sessions[sid]
            entry = sessions.get(session_id)
            if entry is None:
                raise ApiError(404, "unknown_session", f"no session {session_id}")
            entry.last_access = now
            return entry

    @app.post("/sessions", status_code=201)
    async def create_session_endpoint(image: UploadFile):
        data = await image.read()
        img = _decode_upload(data, max_upload_bytes)
        s = engine.create_session(img, model)
        if default_threshold is not None:
            s.threshold = default_threshold
        with store_lock:
            sessions[s.session_id] = SessionEntry(s)
        return {"session_id": s.session_id}

    @app.post("/sessions/{session_id}/reference")
    async def add_reference(session_id: str, image: UploadFile):
        entry = get_entry(session_id)
        img = _decode_upload(await image.read(), max_upload_bytes)
        ref_id = uuid.uuid4().hex
        entry.references[ref_id] = img
        return {"reference_image_id": ref_id}

    @app.post("/sessions/{session_id}/prompts")
    async def add_prompt(
        session_id: str, payload: dict, all: bool = Query(default=False)
    ):
        entry = get_entry(session_id)
        geometry = _parse_geometry(payload)
        polarity = payload.get("polarity")
        if polarity not in ("positive", "negative"):
            raise ApiError(
                422, "invalid_request", f"invalid polarity {polarity!r}"
            )
        ref_image = None
        ref_id = payload.get("reference_image_id")
        if ref_id is not None:
            ref_image = entry.references.get(ref_id)
            if ref_image is None:
                raise ApiError(
                    422, "unknown_reference", f"unknown reference {ref_id}"
                )
        try:
            result = engine.add_prompt(
                entry.session, geometry, polarity, ref_image=ref_image
            )
        except NoPositivePromptError as e:
            raise ApiError(422, "no_positive_prompt", str(e))
        extra = None
        if all and entry.session.last_detections is not None:
            dets = entry.session.last_detections
            extra = [
                {"box": [b.x_min, b.y_min, b.x_max, b.y_max], "score": s}
                for b, s in sorted(
                    zip(dets.boxes, dets.scores),
                    key=lambda t: t[1],
                    reverse=True,
                )
            ]
        return _result_body(result, all_detections=extra)

    @app.put("/sessions/{session_id}/threshold")
    async def put_threshold(session_id: str, payload: dict):
        entry = get_entry(session_id)
        threshold = payload.get("threshold")
        if not isinstance(threshold, (int, float)) or not (0 <= threshold <= 1):
            raise ApiError(
                422, "invalid_threshold", f"threshold must be in [0,1]"
            )
        try:
            result = engine.set_threshold(entry.session, float(threshold))
        except engine.NoRoundsError as e:
            raise ApiError(422, "no_rounds_yet", str(e))
        return _result_body(result)

    @app.delete("/sessions/{session_id}/prompts/{round_number}")
    async def delete_prompt(session_id: str, round_number: int):
        entry = get_entry(session_id)
        try:
            result = engine.remove_prompt(entry.session, round_number)
        except engine.UnknownRoundError as e:
            raise ApiError(404, "unknown_round", str(e))
        except engine.WouldLeaveNoPositiveError as e:
            raise ApiError(422, "would_leave_no_positive", str(e))
        return _result_body(result)

    @app.delete("/sessions/{session_id}", status_code=204)
    async def delete_session(session_id: str):
        get_entry(session_id)
        with store_lock:
            del sessions[session_id]

    if debug_endpoints:

        @app.get("/sessions/{session_id}/debug")
        async def session_debug(session_id: str):
            s = get_entry(session_id).session
            return {
                "encoder_invocations": dict(s.encoder_invocations),
                "prompt_encoder_calls": s.prompt_encoder_calls,
                "decoder_calls": s.decoder_calls,
                "rounds": sorted(s.history),
                "threshold": s.threshold,
            }

    return app
