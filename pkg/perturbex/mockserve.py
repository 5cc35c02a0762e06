"""Serve any backend set over the JSON-over-HTTP wire schema.

``perturbex mock-serve`` uses this with the mock suite so the HTTP adapters in
:mod:`perturbex.backends` can be exercised end to end without a model server.
"""

from __future__ import annotations

import base64
import binascii
import logging

import uvicorn
from pydantic import ValidationError
from starlette.applications import Starlette
from starlette.requests import Request
from starlette.responses import JSONResponse
from starlette.routing import Route

from .backends import (
    BackendDescriptor,
    BackendKind,
    BackendSet,
    InpaintParams,
    build_backend_set,
    detect,
    segment,
)
from .core import decode_binary_mask_png, decode_png, encode_mask_png, encode_png
from .errors import ImageIOError

logger = logging.getLogger(__name__)


class _BadRequest(Exception):
    pass


def _b64decode(value: object, field: str) -> bytes:
    if not isinstance(value, str):
        raise _BadRequest(f"'{field}' must be a base64 string")
    try:
        return base64.b64decode(value, validate=True)
    except binascii.Error as exc:
        raise _BadRequest(f"'{field}' is not valid base64") from exc


async def _json_body(request: Request) -> dict:
    try:
        body = await request.json()
    except ValueError as exc:
        raise _BadRequest("body is not JSON") from exc
    if not isinstance(body, dict):
        raise _BadRequest("body must be a JSON object")
    return body


def create_app(backends: BackendSet) -> Starlette:
    """Starlette app exposing /detect, /segment, /inpaint and /health."""

    async def health(request: Request) -> JSONResponse:
        del request
        return JSONResponse({"status": "ok", "model": backends.inpainter.name})

    async def detect_route(request: Request) -> JSONResponse:
        body = await _json_body(request)
        image = decode_png(_b64decode(body.get("image"), "image"))
        detections = await detect(backends.detector, image)
        return JSONResponse({"detections": [d.to_wire() for d in detections]})

    async def segment_route(request: Request) -> JSONResponse:
        body = await _json_body(request)
        image = decode_png(_b64decode(body.get("image"), "image"))
        raw_boxes = body.get("boxes")
        if not isinstance(raw_boxes, list) or not all(
            isinstance(b, list) and len(b) == 4 for b in raw_boxes
        ):
            raise _BadRequest("'boxes' must be a list of [x, y, w, h]")
        boxes = [(int(b[0]), int(b[1]), int(b[2]), int(b[3])) for b in raw_boxes]
        masks = await segment(backends.segmenter, image, boxes)
        return JSONResponse(
            {"masks": [base64.b64encode(encode_mask_png(m)).decode("ascii") for m in masks]}
        )

    async def inpaint_route(request: Request) -> JSONResponse:
        body = await _json_body(request)
        image = decode_png(_b64decode(body.get("image"), "image"))
        mask = decode_binary_mask_png(_b64decode(body.get("mask"), "mask"))
        try:
            params = InpaintParams.model_validate(body.get("params") or {})
        except ValidationError as exc:
            raise _BadRequest(f"invalid params: {exc}") from exc
        # The client already resized to the model resolution; answer at the size received.
        edited = await backends.inpainter.inpaint(
            image,
            mask,
            str(body.get("prompt", "")),
            str(body.get("negative_prompt", "")),
            params,
        )
        return JSONResponse({"image": base64.b64encode(encode_png(edited)).decode("ascii")})

    async def bad_request(request: Request, exc: Exception) -> JSONResponse:
        logger.warning("rejected %s: %s", request.url.path, exc)
        return JSONResponse({"error": str(exc)}, status_code=400)

    return Starlette(
        routes=[
            Route("/health", health, methods=["GET"]),
            Route("/detect", detect_route, methods=["POST"]),
            Route("/segment", segment_route, methods=["POST"]),
            Route("/inpaint", inpaint_route, methods=["POST"]),
        ],
        exception_handlers={_BadRequest: bad_request, ImageIOError: bad_request, ValueError: bad_request},
    )


def mock_backend_set(
    detector: str = "blob-detector",
    segmenter: str = "blob-segmenter",
    inpainter: str = "fill-inpainter",
    *,
    detector_options: dict[str, str] | None = None,
    segmenter_options: dict[str, str] | None = None,
    inpainter_options: dict[str, str] | None = None,
) -> BackendSet:
    return build_backend_set(
        BackendDescriptor(
            kind=BackendKind.DETECTOR, endpoint=f"mock:{detector}", options=detector_options or {}
        ),
        BackendDescriptor(
            kind=BackendKind.SEGMENTER, endpoint=f"mock:{segmenter}", options=segmenter_options or {}
        ),
        BackendDescriptor(
            kind=BackendKind.INPAINTER, endpoint=f"mock:{inpainter}", options=inpainter_options or {}
        ),
    )


async def serve(backends: BackendSet, *, host: str = "127.0.0.1", port: int = 8765) -> None:
    """Run the wire-schema server until interrupted."""
    config = uvicorn.Config(create_app(backends), host=host, port=port, log_level="info")
    logger.info("serving %s on http://%s:%d", backends.inpainter.name, host, port)
    await uvicorn.Server(config).serve()
