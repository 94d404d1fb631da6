"""FastAPI app exposing one model role behind the engine wire protocol.

One process serves one role at its path (/v1/caption, /v1/chat or
/v1/detect); anything else is 404. Request validation failures are 4xx with
an error body and never take the service down. Concurrency is bounded by
max_batch; the model itself is stateless between requests.
"""

from __future__ import annotations

import asyncio
import base64
import binascii
import io
import logging
from typing import Literal

import anyio
from fastapi import FastAPI, HTTPException
from fastapi.exceptions import RequestValidationError
from PIL import Image
from pydantic import BaseModel, Field

from .models import ShimConfig, load_model

logger = logging.getLogger(__name__)

ROLE_PATHS = {"captioner": "/v1/caption", "chat": "/v1/chat", "detector": "/v1/detect"}


class ImageRef(BaseModel):
    path: str | None = None
    b64: str | None = None
    format: str | None = None


class CaptionRequest(BaseModel):
    image: ImageRef
    prompt: str = Field(min_length=1)
    model_id: str = Field(min_length=1)
    tag: str | None = None


class ChatMessage(BaseModel):
    role: str
    text: str


class ChatRequest(BaseModel):
    messages: list[ChatMessage] = Field(min_length=1)
    model_id: str = Field(min_length=1)
    tag: str | None = None


class DetectRequest(BaseModel):
    image: ImageRef
    labels: list[str] = Field(min_length=1)
    model_id: str = Field(min_length=1)


def _open_image(ref: ImageRef) -> Image.Image:
    if ref.b64 is not None:
        try:
            raw = base64.b64decode(ref.b64, validate=True)
            return Image.open(io.BytesIO(raw)).convert("RGB")
        except (binascii.Error, OSError) as exc:
            raise HTTPException(status_code=400, detail=f"undecodable image: {exc}")
    if ref.path is not None:
        try:
            return Image.open(ref.path).convert("RGB")
        except OSError as exc:
            raise HTTPException(status_code=400, detail=f"unreadable image path: {exc}")
    raise HTTPException(status_code=400, detail="image needs 'path' or 'b64'")


def create_app(cfg: ShimConfig) -> FastAPI:
    """Build the app; model loading happens here and failures propagate."""
    model = load_model(cfg)
    app = FastAPI(title=f"capshim-{cfg.role}", version="0.1.0")
    gate = asyncio.Semaphore(cfg.max_batch)

    @app.get("/healthz")
    async def healthz() -> dict:
        return {"ok": True, "role": cfg.role, "model": cfg.model}

    async def _bounded(fn, *args):
        async with gate:
            return await anyio.to_thread.run_sync(fn, *args)

    if cfg.role == "captioner":

        @app.post("/v1/caption")
        async def caption(req: CaptionRequest) -> dict:
            image = _open_image(req.image)
            text = await _bounded(model.caption, image, req.prompt)
            return {"text": text}

    elif cfg.role == "chat":

        @app.post("/v1/chat")
        async def chat(req: ChatRequest) -> dict:
            messages = [m.model_dump() for m in req.messages]
            text = await _bounded(model.reply, messages)
            return {"text": text}

    else:

        @app.post("/v1/detect")
        async def detect(req: DetectRequest) -> dict:
            for label in req.labels:
                if label != label.strip().lower():
                    raise HTTPException(
                        status_code=400, detail=f"label not normalized: {label!r}"
                    )
            image = _open_image(req.image)
            detections = await _bounded(model.detect, image, req.labels)
            width, height = image.size
            for hit in detections:
                x0, y0, x1, y1 = hit["box"]
                if not (0 <= x0 <= x1 <= width and 0 <= y0 <= y1 <= height):
                    logger.error("model produced out-of-bounds box %s", hit)
                    raise HTTPException(status_code=500, detail="model box out of bounds")
            return {"detections": detections}

    @app.exception_handler(HTTPException)
    async def error_body(request, exc: HTTPException):
        from fastapi.responses import JSONResponse

        return JSONResponse(status_code=exc.status_code, content={"error": exc.detail})

    @app.exception_handler(RequestValidationError)
    async def validation_body(request, exc: RequestValidationError):
        from fastapi.responses import JSONResponse

        first = exc.errors()[0] if exc.errors() else {}
        where = ".".join(str(part) for part in first.get("loc", ()))
        return JSONResponse(
            status_code=400,
            content={"error": f"invalid request: {where}: {first.get('msg', 'bad body')}"},
        )

    return app


def serve(cfg: ShimConfig) -> None:
    """Run the shim until interrupted; model-load failures exit nonzero upstream."""
    import uvicorn

    app = create_app(cfg)
    uvicorn.run(app, host=cfg.host, port=cfg.port, log_level="warning")
