"""Detector, segmenter and inpainter backends.

Backends are consumed through three async protocols. ``HttpDetector``,
``HttpSegmenter`` and ``HttpInpainter`` speak the JSON-over-HTTP wire schema;
the mock suite in :mod:`perturbex.mocks` implements the same protocols in
process. The module-level :func:`detect`, :func:`segment` and :func:`inpaint`
wrap any backend and enforce the shared contracts (sorting, clamping,
resizing, restoring unmasked pixels).
"""

from __future__ import annotations

import asyncio
import base64
import hashlib
import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from enum import StrEnum
from typing import Any, Protocol, runtime_checkable

import httpx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .core import (
    BBox,
    BinaryMask,
    Detection,
    RasterImage,
    clamp_bbox,
    decode_binary_mask_png,
    decode_png,
    encode_mask_png,
    encode_png,
    require_same_size,
    resize_image,
    sort_detections,
)
from .errors import (
    BackendTimeoutError,
    ImageIOError,
    MalformedResponseError,
    NotApplicableError,
    ServiceError,
)
from .maskops import resize_mask
from .prompts import ModelFamily
from .settings import Settings, get_settings
from .timing import Clock, MonotonicClock

logger = logging.getLogger(__name__)

MOCK_SCHEME = "mock:"


class BackendKind(StrEnum):
    DETECTOR = "detector"
    SEGMENTER = "segmenter"
    INPAINTER = "inpainter"


# Request resolution and default scheduler per model family; None keeps native size.
FAMILY_DEFAULTS: dict[ModelFamily, tuple[tuple[int, int] | None, str]] = {
    ModelFamily.STABLE_DIFFUSION: ((512, 512), "DPMSolverMultistep"),
    ModelFamily.SDXL: ((1024, 1024), "K_EULER"),
    ModelFamily.FLUX: ((1024, 1024), "flow"),
    ModelFamily.LAMA: (None, "none"),
}


class InpaintParams(BaseModel):
    """Sampling parameters passed through to the inpainting service."""

    model_config = ConfigDict(frozen=True)

    guidance_scale: float = Field(default=20.0, gt=0)
    num_inference_steps: int = Field(default=100, ge=1)
    strength: float = Field(default=1.0, ge=0.0, le=1.0)
    scheduler: str = "DPMSolverMultistep"
    seed: int = 42
    target_resolution: tuple[int, int] | None = None

    @classmethod
    def for_family(cls, family: ModelFamily, **updates: Any) -> InpaintParams:
        """Defaults for a model family, with its request resolution filled in."""
        resolution, scheduler = FAMILY_DEFAULTS[ModelFamily(family)]
        values: dict[str, Any] = {"scheduler": scheduler, "target_resolution": resolution}
        values.update(updates)
        return cls(**values)

    def wire(self) -> dict[str, Any]:
        return {
            "guidance_scale": self.guidance_scale,
            "num_inference_steps": self.num_inference_steps,
            "strength": self.strength,
            "scheduler": self.scheduler,
            "seed": self.seed,
        }


class RetryPolicy(BaseModel):
    model_config = ConfigDict(frozen=True)

    max_retries: int = Field(default=2, ge=0)
    backoff_s: float = Field(default=0.5, ge=0.0)


class BackendDescriptor(BaseModel):
    """Where a backend lives and how to talk to it.

    ``endpoint`` is an http(s) URL or ``mock:<name>``; mock backends ignore
    the network settings and honor ``simulated_latency_s`` instead.
    """

    model_config = ConfigDict(frozen=True)

    kind: BackendKind
    endpoint: str
    model_family: ModelFamily = ModelFamily.STABLE_DIFFUSION
    max_concurrency: int = Field(default=4, ge=1)
    timeout_s: float | None = Field(default=None, gt=0)
    retry: RetryPolicy = RetryPolicy()
    options: dict[str, str] = Field(default_factory=dict)
    simulated_latency_s: float = Field(default=0.0, ge=0.0)

    @property
    def is_mock(self) -> bool:
        return self.endpoint.startswith(MOCK_SCHEME)

    @property
    def mock_name(self) -> str:
        return self.endpoint[len(MOCK_SCHEME) :]

    def identity(self) -> str:
        """Stable string identifying the backend for cache keys."""
        options = ",".join(f"{k}={v}" for k, v in sorted(self.options.items()))
        return f"{self.kind}|{self.endpoint}|{self.model_family}|{options}"


class BackendStatus(BaseModel):
    model_config = ConfigDict(frozen=True)

    endpoint: str
    reachable: bool
    model: str | None = None
    cause: str | None = None


@runtime_checkable
class Detector(Protocol):
    name: str

    async def detect(self, image: RasterImage) -> list[Detection]: ...

    async def healthcheck(self) -> BackendStatus: ...


@runtime_checkable
class Segmenter(Protocol):
    name: str

    async def segment(self, image: RasterImage, boxes: Sequence[BBox]) -> list[BinaryMask]: ...

    async def healthcheck(self) -> BackendStatus: ...


@runtime_checkable
class Inpainter(Protocol):
    name: str

    async def inpaint(
        self,
        image: RasterImage,
        mask: BinaryMask,
        positive: str,
        negative: str,
        params: InpaintParams,
    ) -> RasterImage: ...

    async def healthcheck(self) -> BackendStatus: ...


@dataclass
class BackendSet:
    detector: Detector
    segmenter: Segmenter
    inpainter: Inpainter
    model_family: ModelFamily = ModelFamily.STABLE_DIFFUSION

    async def healthcheck(self) -> list[BackendStatus]:
        return list(
            await asyncio.gather(
                self.detector.healthcheck(),
                self.segmenter.healthcheck(),
                self.inpainter.healthcheck(),
            )
        )


def restore_unmasked(original: RasterImage, edited: RasterImage, mask: BinaryMask) -> RasterImage:
    """Paste original pixels back wherever the mask is false."""
    require_same_size(original, edited, mask)
    return RasterImage(np.where(mask.bits[:, :, np.newaxis], edited.pixels, original.pixels))


async def detect(detector: Detector, image: RasterImage) -> list[Detection]:
    """Run a detector and normalize its output: clamped boxes, descending confidence."""
    detections = await detector.detect(image)
    clamped = [c for d in detections if (c := d.clamped(image.width, image.height)) is not None]
    return sort_detections(clamped)


async def segment(
    segmenter: Segmenter, image: RasterImage, boxes: Sequence[BBox]
) -> list[BinaryMask]:
    """One mask per box; boxes are clamped to the image first."""
    clamped: list[BBox] = []
    for box in boxes:
        c = clamp_bbox(box, image.width, image.height)
        if c is None:
            raise ValueError(f"box {list(box)} lies outside the image")
        clamped.append(c)
    if not clamped:
        return []
    masks = await segmenter.segment(image, clamped)
    if len(masks) != len(clamped):
        raise MalformedResponseError(
            f"segmenter {segmenter.name} returned {len(masks)} masks for {len(clamped)} boxes"
        )
    for mask in masks:
        if mask.size != image.size:
            raise MalformedResponseError(
                f"segmenter {segmenter.name} returned a {mask.size} mask for a {image.size} image"
            )
    return masks


async def inpaint(
    inpainter: Inpainter,
    image: RasterImage,
    mask: BinaryMask,
    positive: str,
    negative: str,
    params: InpaintParams,
    *,
    restore: bool = True,
) -> RasterImage:
    """Inpaint the masked region at the requested resolution and map back to native size."""
    require_same_size(image, mask)
    if mask.is_empty():
        raise NotApplicableError("inpaint mask is empty")

    request_image, request_mask = image, mask
    if params.target_resolution is not None and params.target_resolution != image.size:
        w, h = params.target_resolution
        request_image = resize_image(image, w, h)
        resized = resize_mask(mask, w, h)
        assert isinstance(resized, BinaryMask)
        request_mask = resized

    edited = await inpainter.inpaint(request_image, request_mask, positive, negative, params)
    if edited.size != request_image.size:
        raise MalformedResponseError(
            f"inpainter {inpainter.name} returned {edited.size} for a {request_image.size} request"
        )
    edited = resize_image(edited, image.width, image.height)
    if not restore:
        return edited
    return restore_unmasked(image, edited, mask)


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: Any) -> bytes:
    if not isinstance(text, str):
        raise MalformedResponseError("expected a base64 string", json.dumps(text)[:200])
    try:
        return base64.b64decode(text, validate=True)
    except ValueError as exc:
        raise MalformedResponseError("invalid base64 payload", text) from exc


def canonical_json(payload: Any) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


class _TransientStatus(Exception):
    def __init__(self, error: ServiceError) -> None:
        self.error = error


class HttpBackend:
    """Shared transport, admission limit, retry and auth for HTTP backends."""

    def __init__(
        self,
        descriptor: BackendDescriptor,
        *,
        settings: Settings | None = None,
        transport: httpx.AsyncBaseTransport | None = None,
    ) -> None:
        self.descriptor = descriptor
        self.name = descriptor.endpoint
        self._settings = settings or get_settings()
        self._transport = transport
        self._semaphore = asyncio.Semaphore(descriptor.max_concurrency)
        self._timeout = descriptor.timeout_s or self._settings.timeout_s

    def _url(self, route: str) -> str:
        return f"{self.descriptor.endpoint.rstrip('/')}/{route}"

    def _headers(self, request_id: str) -> dict[str, str]:
        headers = {"Content-Type": "application/json", "Idempotency-Key": request_id}
        if self._settings.api_token is not None:
            headers["Authorization"] = f"Bearer {self._settings.api_token.get_secret_value()}"
        return headers

    def _client(self) -> httpx.AsyncClient:
        return httpx.AsyncClient(transport=self._transport, timeout=self._timeout)

    async def _post(self, route: str, payload: dict[str, Any]) -> dict[str, Any]:
        body = canonical_json(payload)
        # Content-addressed, so a retried request is recognizably the same request.
        request_id = hashlib.sha256(route.encode("utf-8") + b"\0" + body).hexdigest()
        policy = self.descriptor.retry
        last_error: Exception | None = None

        for attempt in range(policy.max_retries + 1):
            try:
                async with self._semaphore:
                    async with self._client() as client:
                        response = await client.post(
                            self._url(route), content=body, headers=self._headers(request_id)
                        )
                if response.status_code == 429 or response.status_code >= 500:
                    raise _TransientStatus(
                        ServiceError(f"{self._url(route)} returned HTTP {response.status_code}")
                    )
                if response.status_code >= 400:
                    raise ServiceError(
                        f"{self._url(route)} returned HTTP {response.status_code}: {response.text[:200]}"
                    )
                try:
                    data = response.json()
                except ValueError as exc:
                    raise MalformedResponseError(
                        f"{self._url(route)} returned non-JSON", response.content
                    ) from exc
                if not isinstance(data, dict):
                    raise MalformedResponseError(
                        f"{self._url(route)} returned a non-object", response.content
                    )
                return data
            except httpx.TimeoutException as exc:
                last_error = BackendTimeoutError(f"{self._url(route)} timed out after {self._timeout}s")
                last_error.__cause__ = exc
            except httpx.TransportError as exc:
                last_error = ServiceError(f"{self._url(route)} unreachable: {exc}")
                last_error.__cause__ = exc
            except _TransientStatus as exc:
                last_error = exc.error

            if attempt < policy.max_retries:
                delay = policy.backoff_s * (2**attempt)
                logger.debug(
                    "retrying %s in %.2fs (attempt %d): %s", route, delay, attempt + 1, last_error
                )
                await asyncio.sleep(delay)

        assert last_error is not None
        raise last_error

    async def healthcheck(self) -> BackendStatus:
        endpoint = self.descriptor.endpoint
        try:
            async with self._client() as client:
                response = await client.get(self._url("health"))
            data = response.json()
        except (httpx.HTTPError, ValueError) as exc:
            return BackendStatus(endpoint=endpoint, reachable=False, cause=str(exc) or type(exc).__name__)
        if (
            response.status_code != 200
            or not isinstance(data, dict)
            or data.get("status") != "ok"
            or not isinstance(data.get("model"), str)
        ):
            return BackendStatus(endpoint=endpoint, reachable=False, cause="schema")
        return BackendStatus(endpoint=endpoint, reachable=True, model=data["model"])


class HttpDetector(HttpBackend):
    async def detect(self, image: RasterImage) -> list[Detection]:
        data = await self._post("detect", {"image": _b64(encode_png(image))})
        raw = data.get("detections")
        if not isinstance(raw, list):
            raise MalformedResponseError("detect response lacks a 'detections' list", json.dumps(data))
        try:
            return [Detection.model_validate(item) for item in raw]
        except ValidationError as exc:
            raise MalformedResponseError(f"invalid detection: {exc}", json.dumps(data)) from exc


class HttpSegmenter(HttpBackend):
    async def segment(self, image: RasterImage, boxes: Sequence[BBox]) -> list[BinaryMask]:
        data = await self._post(
            "segment",
            {"image": _b64(encode_png(image)), "boxes": [list(box) for box in boxes]},
        )
        raw = data.get("masks")
        if not isinstance(raw, list):
            raise MalformedResponseError("segment response lacks a 'masks' list", json.dumps(data))
        try:
            return [decode_binary_mask_png(_unb64(item)) for item in raw]
        except ImageIOError as exc:
            raise MalformedResponseError(str(exc), json.dumps(data)) from exc


class HttpInpainter(HttpBackend):
    async def inpaint(
        self,
        image: RasterImage,
        mask: BinaryMask,
        positive: str,
        negative: str,
        params: InpaintParams,
    ) -> RasterImage:
        data = await self._post(
            "inpaint",
            {
                "image": _b64(encode_png(image)),
                "mask": _b64(encode_mask_png(mask)),
                "prompt": positive,
                "negative_prompt": negative,
                "params": params.wire(),
            },
        )
        try:
            return decode_png(_unb64(data.get("image")))
        except ImageIOError as exc:
            raise MalformedResponseError(str(exc), json.dumps(data)) from exc


_HTTP_CLASSES: dict[BackendKind, type[HttpBackend]] = {
    BackendKind.DETECTOR: HttpDetector,
    BackendKind.SEGMENTER: HttpSegmenter,
    BackendKind.INPAINTER: HttpInpainter,
}


def build_backend(
    descriptor: BackendDescriptor,
    *,
    clock: Clock | None = None,
    settings: Settings | None = None,
    transport: httpx.AsyncBaseTransport | None = None,
) -> Any:
    """Instantiate the backend a descriptor names."""
    if descriptor.is_mock:
        from .mocks import create_mock

        return create_mock(descriptor, clock=clock or MonotonicClock())
    return _HTTP_CLASSES[descriptor.kind](descriptor, settings=settings, transport=transport)


def build_backend_set(
    detector: BackendDescriptor,
    segmenter: BackendDescriptor,
    inpainter: BackendDescriptor,
    *,
    clock: Clock | None = None,
    settings: Settings | None = None,
    transport: httpx.AsyncBaseTransport | None = None,
) -> BackendSet:
    for descriptor, kind in (
        (detector, BackendKind.DETECTOR),
        (segmenter, BackendKind.SEGMENTER),
        (inpainter, BackendKind.INPAINTER),
    ):
        if descriptor.kind != kind:
            raise ValueError(f"expected a {kind} descriptor, got {descriptor.kind}")
    options = {"clock": clock, "settings": settings, "transport": transport}
    return BackendSet(
        detector=build_backend(detector, **options),
        segmenter=build_backend(segmenter, **options),
        inpainter=build_backend(inpainter, **options),
        model_family=inpainter.model_family,
    )


async def healthcheck(
    descriptor: BackendDescriptor,
    *,
    transport: httpx.AsyncBaseTransport | None = None,
) -> BackendStatus:
    """Probe a backend; failures are reported in the status, never raised."""
    try:
        backend = build_backend(descriptor, transport=transport)
    except (ValueError, KeyError) as exc:
        return BackendStatus(endpoint=descriptor.endpoint, reachable=False, cause=str(exc))
    status: BackendStatus = await backend.healthcheck()
    return status

