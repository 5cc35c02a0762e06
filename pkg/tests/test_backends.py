"""Tests for backend contracts, the mock suite and the HTTP adapters."""

from __future__ import annotations

import json

import httpx
import numpy as np
import pytest

from perturbex.backends import (
    BackendDescriptor,
    BackendKind,
    HttpDetector,
    HttpInpainter,
    HttpSegmenter,
    InpaintParams,
    RetryPolicy,
    build_backend,
    detect,
    healthcheck,
    inpaint,
    segment,
)
from perturbex.core import BinaryMask, RasterImage
from perturbex.errors import MalformedResponseError, ServiceError
from perturbex.maskops import bbox_to_mask
from perturbex.mocks import (
    BACKGROUND_COLOR,
    BlobDetector,
    BlobSegmenter,
    FillInpainter,
    IdentityInpainter,
    RectSegmenter,
    StampInpainter,
    ellipse_mask,
    make_blob_image,
    red_pixels,
    stamp_glyph,
)
from perturbex.mockserve import create_app, mock_backend_set
from perturbex.prompts import ModelFamily
from perturbex.settings import Settings

NATIVE = InpaintParams(target_resolution=None)
ONE_BLOB = (30.0, 40.0, 12.0, 9.0)
TWO_BLOBS = [(25.0, 25.0, 14.0, 14.0), (70.0, 70.0, 10.0, 8.0)]


def _descriptor(kind: BackendKind, endpoint: str = "http://backend", **extra) -> BackendDescriptor:
    return BackendDescriptor(kind=kind, endpoint=endpoint, retry=RetryPolicy(backoff_s=0.0), **extra)


async def test_blob_detector_single_blob():
    image = make_blob_image(96, 96, [ONE_BLOB])
    detections = await detect(BlobDetector(), image)
    area = ellipse_mask(96, 96, ONE_BLOB).count
    assert len(detections) == 1
    assert detections[0].confidence == pytest.approx(min(1.0, area / 1000))
    assert detections[0].class_label == "seal"


async def test_blob_detector_blank_image():
    assert await detect(BlobDetector(), RasterImage.filled(32, 32, BACKGROUND_COLOR)) == []


async def test_blob_detector_two_blobs_sorted():
    image = make_blob_image(96, 96, TWO_BLOBS)
    detections = await detect(BlobDetector(), image)
    assert len(detections) == 2
    assert detections[0].confidence >= detections[1].confidence
    areas = sorted((ellipse_mask(96, 96, b).count for b in TWO_BLOBS), reverse=True)
    assert [d.confidence for d in detections] == pytest.approx([min(1.0, a / 1000) for a in areas])


async def test_rect_segmenter_matches_bbox_masks():
    image = RasterImage.filled(20, 20, BACKGROUND_COLOR)
    boxes = [(1, 1, 5, 5), (10, 2, 4, 8)]
    masks = await segment(RectSegmenter(), image, boxes)
    assert masks == [bbox_to_mask(b, 20, 20) for b in boxes]


async def test_blob_segmenter_exact_ellipse():
    image = make_blob_image(96, 96, [ONE_BLOB])
    (det,) = await detect(BlobDetector(), image)
    (mask,) = await segment(BlobSegmenter(), image, [det.bbox])
    assert mask == ellipse_mask(96, 96, ONE_BLOB)


async def test_segment_empty_boxes():
    assert await segment(BlobSegmenter(), RasterImage.filled(8, 8, (0, 0, 0)), []) == []


async def test_segment_rejects_wrong_mask_count():
    class Short:
        name = "short"

        async def segment(self, image, boxes):
            return []

    with pytest.raises(MalformedResponseError):
        await segment(Short(), RasterImage.filled(8, 8, (0, 0, 0)), [(0, 0, 2, 2)])


async def test_fill_inpainter_erases_blob():
    image = make_blob_image(96, 96, [ONE_BLOB])
    mask = BinaryMask(red_pixels(image))
    out = await inpaint(FillInpainter(), image, mask, "", "", NATIVE)
    assert np.all(out.pixels[mask.bits] == BACKGROUND_COLOR)
    assert np.array_equal(out.pixels[~mask.bits], image.pixels[~mask.bits])
    assert await detect(BlobDetector(), out) == []


async def test_identity_inpainter_returns_input():
    image = make_blob_image(64, 64, [(30.0, 30.0, 10.0, 10.0)])
    out = await inpaint(IdentityInpainter(), image, BinaryMask(red_pixels(image)), "", "", NATIVE)
    assert out == image


async def test_stamp_inpainter_paints_glyph():
    image = make_blob_image(96, 96, [ONE_BLOB])
    mask = BinaryMask(red_pixels(image))
    out = await inpaint(StampInpainter(target="boat"), image, mask, "", "", NATIVE)
    glyph = stamp_glyph("boat", 96, 96)
    assert np.array_equal(out.pixels[mask.bits], glyph[mask.bits])
    assert await detect(BlobDetector(), out) == []


async def test_inpaint_resizes_and_restores_unmasked_pixels():
    image = make_blob_image(96, 80, [ONE_BLOB])
    mask = BinaryMask(red_pixels(image))
    params = InpaintParams.for_family(ModelFamily.STABLE_DIFFUSION)
    assert params.target_resolution == (512, 512)
    out = await inpaint(FillInpainter(), image, mask, "", "", params)
    assert out.size == image.size
    assert np.array_equal(out.pixels[~mask.bits], image.pixels[~mask.bits])


async def test_inpaint_rejects_wrong_output_size():
    class Shrinker:
        name = "shrinker"

        async def inpaint(self, image, mask, positive, negative, params):
            return RasterImage.filled(2, 2, (0, 0, 0))

    image = RasterImage.filled(8, 8, (0, 0, 0))
    with pytest.raises(MalformedResponseError):
        await inpaint(Shrinker(), image, BinaryMask.full(8, 8), "", "", NATIVE)


def test_family_defaults():
    assert InpaintParams.for_family(ModelFamily.SDXL).target_resolution == (1024, 1024)
    assert InpaintParams.for_family(ModelFamily.LAMA).target_resolution is None
    defaults = InpaintParams()
    assert (defaults.guidance_scale, defaults.num_inference_steps, defaults.seed) == (20.0, 100, 42)


def test_unknown_mock_name():
    with pytest.raises(ValueError, match="unknown mock"):
        build_backend(BackendDescriptor(kind=BackendKind.DETECTOR, endpoint="mock:nope"))


async def test_healthcheck_mock_is_reachable():
    status = await healthcheck(BackendDescriptor(kind=BackendKind.DETECTOR, endpoint="mock:blob-detector"))
    assert status.reachable


async def test_healthcheck_unreachable_has_cause():
    def refuse(request: httpx.Request) -> httpx.Response:
        raise httpx.ConnectError("connection refused", request=request)

    status = await healthcheck(
        _descriptor(BackendKind.DETECTOR, "http://10.255.255.1:9"),
        transport=httpx.MockTransport(refuse),
    )
    assert not status.reachable
    assert "refused" in (status.cause or "")


async def test_healthcheck_wrong_schema():
    transport = httpx.MockTransport(lambda request: httpx.Response(200, json={"hello": "world"}))
    status = await healthcheck(_descriptor(BackendKind.INPAINTER), transport=transport)
    assert not status.reachable
    assert status.cause == "schema"


async def test_http_adapters_match_in_process_mocks():
    backends = mock_backend_set()
    transport = httpx.ASGITransport(app=create_app(backends))
    settings = Settings()
    detector = HttpDetector(_descriptor(BackendKind.DETECTOR), settings=settings, transport=transport)
    segmenter = HttpSegmenter(_descriptor(BackendKind.SEGMENTER), settings=settings, transport=transport)
    inpainter = HttpInpainter(_descriptor(BackendKind.INPAINTER), settings=settings, transport=transport)

    image = make_blob_image(96, 96, TWO_BLOBS)
    remote = await detect(detector, image)
    local = await detect(backends.detector, image)
    assert remote == local

    boxes = [d.bbox for d in local]
    assert await segment(segmenter, image, boxes) == await segment(backends.segmenter, image, boxes)

    mask = BinaryMask(red_pixels(image))
    remote_out = await inpaint(inpainter, image, mask, "p", "n", NATIVE)
    local_out = await inpaint(backends.inpainter, image, mask, "p", "n", NATIVE)
    assert remote_out.tobytes() == local_out.tobytes()

    status = await inpainter.healthcheck()
    assert status.reachable and status.model == "mock:fill-inpainter"


async def test_http_retries_transient_status_with_same_idempotency_key():
    seen: list[httpx.Request] = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request)
        if len(seen) == 1:
            return httpx.Response(503, text="busy")
        return httpx.Response(200, json={"detections": []})

    detector = HttpDetector(
        _descriptor(BackendKind.DETECTOR),
        settings=Settings(api_token="secret-token"),
        transport=httpx.MockTransport(handler),
    )
    assert await detector.detect(RasterImage.filled(4, 4, (0, 0, 0))) == []
    assert len(seen) == 2
    assert seen[0].headers["Idempotency-Key"] == seen[1].headers["Idempotency-Key"]
    assert seen[0].headers["Authorization"] == "Bearer secret-token"
    assert json.loads(seen[0].content)["image"]


async def test_http_gives_up_after_retries():
    calls = {"count": 0}

    def handler(request: httpx.Request) -> httpx.Response:
        calls["count"] += 1
        return httpx.Response(500)

    detector = HttpDetector(
        _descriptor(BackendKind.DETECTOR), settings=Settings(), transport=httpx.MockTransport(handler)
    )
    with pytest.raises(ServiceError):
        await detector.detect(RasterImage.filled(4, 4, (0, 0, 0)))
    assert calls["count"] == 3


async def test_http_client_error_is_not_retried():
    calls = {"count": 0}

    def handler(request: httpx.Request) -> httpx.Response:
        calls["count"] += 1
        return httpx.Response(400, json={"error": "bad"})

    detector = HttpDetector(
        _descriptor(BackendKind.DETECTOR), settings=Settings(), transport=httpx.MockTransport(handler)
    )
    with pytest.raises(ServiceError, match="400"):
        await detector.detect(RasterImage.filled(4, 4, (0, 0, 0)))
    assert calls["count"] == 1


async def test_http_malformed_payload_excerpt():
    transport = httpx.MockTransport(lambda request: httpx.Response(200, json={"boxes": "x" * 500}))
    detector = HttpDetector(_descriptor(BackendKind.DETECTOR), settings=Settings(), transport=transport)
    with pytest.raises(MalformedResponseError) as excinfo:
        await detector.detect(RasterImage.filled(4, 4, (0, 0, 0)))
    assert len(excinfo.value.excerpt) <= 200
