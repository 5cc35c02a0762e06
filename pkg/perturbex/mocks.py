"""Deterministic in-process backends and synthetic blob fixtures.

The mocks stand in for the detector, segmenter and inpainter services so an
entire run can be reproduced without model weights. Red pixels play the role
of animals: ``BlobDetector`` reports each red connected component,
``BlobSegmenter`` returns its exact pixels, and the inpainters either erase,
keep or stamp over the masked region.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from scipy import ndimage

from .backends import BackendDescriptor, BackendKind, BackendStatus, InpaintParams
from .core import BBox, BinaryMask, Detection, RasterImage, write_image
from .maskops import bbox_to_mask, pad
from .timing import Clock, MonotonicClock

BLOB_COLOR = (220, 30, 30)
BACKGROUND_COLOR = (128, 128, 128)

# A pixel counts as "red" when R is high and both G and B are low.
RED_MIN = 200
OTHER_MAX = 80

# Glyph colors; none of them passes the red test.
GLYPH_PALETTE = [
    (101, 67, 33),
    (240, 240, 235),
    (40, 70, 120),
    (200, 180, 60),
    (60, 110, 60),
    (30, 30, 30),
]

Ellipse = tuple[float, float, float, float]


def red_pixels(image: RasterImage) -> np.ndarray:
    px = image.pixels
    return (px[:, :, 0] >= RED_MIN) & (px[:, :, 1] <= OTHER_MAX) & (px[:, :, 2] <= OTHER_MAX)


class MockBackend:
    """Common latency simulation and health reporting."""

    mock_name = "mock"

    def __init__(self, *, latency_s: float = 0.0, clock: Clock | None = None) -> None:
        self.name = f"mock:{self.mock_name}"
        self.latency_s = latency_s
        self.clock = clock or MonotonicClock()

    async def _pause(self) -> None:
        await self.clock.sleep(self.latency_s)

    async def healthcheck(self) -> BackendStatus:
        return BackendStatus(endpoint=self.name, reachable=True, model=self.name)


class BlobDetector(MockBackend):
    """One detection per red connected component; confidence = min(1, area / area_scale)."""

    mock_name = "blob-detector"

    def __init__(
        self,
        class_label: str = "seal",
        area_scale: float = 1000.0,
        *,
        latency_s: float = 0.0,
        clock: Clock | None = None,
    ) -> None:
        super().__init__(latency_s=latency_s, clock=clock)
        self.class_label = class_label
        self.area_scale = area_scale

    async def detect(self, image: RasterImage) -> list[Detection]:
        await self._pause()
        labels, _ = ndimage.label(red_pixels(image))
        detections = []
        for index, region in enumerate(ndimage.find_objects(labels), start=1):
            if region is None:
                continue
            rows, cols = region
            area = int((labels[region] == index).sum())
            detections.append(
                Detection(
                    class_label=self.class_label,
                    bbox=(cols.start, rows.start, cols.stop - cols.start, rows.stop - rows.start),
                    confidence=min(1.0, area / self.area_scale),
                )
            )
        return detections


class RectSegmenter(MockBackend):
    """Returns each box as a filled rectangle."""

    mock_name = "rect-segmenter"

    async def segment(self, image: RasterImage, boxes: Sequence[BBox]) -> list[BinaryMask]:
        await self._pause()
        return [bbox_to_mask(box, image.width, image.height) for box in boxes]


class BlobSegmenter(MockBackend):
    """Returns the red pixels inside each box."""

    mock_name = "blob-segmenter"

    async def segment(self, image: RasterImage, boxes: Sequence[BBox]) -> list[BinaryMask]:
        await self._pause()
        red = red_pixels(image)
        return [
            BinaryMask(red & bbox_to_mask(box, image.width, image.height).bits) for box in boxes
        ]


class IdentityInpainter(MockBackend):
    mock_name = "identity-inpainter"

    async def inpaint(
        self,
        image: RasterImage,
        mask: BinaryMask,
        positive: str,
        negative: str,
        params: InpaintParams,
    ) -> RasterImage:
        await self._pause()
        return image


class FillInpainter(MockBackend):
    """Fills the mask with the mean color of the unmasked ring around it.

    The ring is ``ring_px`` pixels wide. With no ring (the mask covers the
    whole frame) the fill falls back to ``fallback_color``.
    """

    mock_name = "fill-inpainter"

    def __init__(
        self,
        ring_px: int = 2,
        fallback_color: tuple[int, int, int] = BACKGROUND_COLOR,
        *,
        latency_s: float = 0.0,
        clock: Clock | None = None,
    ) -> None:
        super().__init__(latency_s=latency_s, clock=clock)
        self.ring_px = ring_px
        self.fallback_color = fallback_color

    def fill_color(self, image: RasterImage, mask: BinaryMask) -> tuple[int, int, int]:
        ring = pad(mask, self.ring_px).bits & ~mask.bits
        if not ring.any():
            return self.fallback_color
        mean = image.pixels[ring].astype(np.float64).mean(axis=0)
        r, g, b = (int(v) for v in np.floor(mean + 0.5))
        return r, g, b

    async def inpaint(
        self,
        image: RasterImage,
        mask: BinaryMask,
        positive: str,
        negative: str,
        params: InpaintParams,
    ) -> RasterImage:
        await self._pause()
        color = np.array(self.fill_color(image, mask), dtype=np.uint8)
        return RasterImage(np.where(mask.bits[:, :, np.newaxis], color, image.pixels))


def stamp_glyph(target: str, width: int, height: int) -> np.ndarray:
    """Deterministic two-color checker raster standing in for a generated object."""
    digest = hashlib.sha256(target.encode("utf-8")).digest()
    first = digest[0] % len(GLYPH_PALETTE)
    second = (first + 1 + digest[1] % (len(GLYPH_PALETTE) - 1)) % len(GLYPH_PALETTE)
    ys, xs = np.mgrid[0:height, 0:width]
    checker = ((xs // 3) + (ys // 3)) % 2 == 0
    glyph = np.empty((height, width, 3), dtype=np.uint8)
    glyph[checker] = GLYPH_PALETTE[first]
    glyph[~checker] = GLYPH_PALETTE[second]
    return glyph


class StampInpainter(MockBackend):
    """Paints the target-class glyph over the masked region."""

    mock_name = "stamp-inpainter"

    def __init__(
        self,
        target: str = "boat",
        *,
        latency_s: float = 0.0,
        clock: Clock | None = None,
    ) -> None:
        super().__init__(latency_s=latency_s, clock=clock)
        self.target = target

    async def inpaint(
        self,
        image: RasterImage,
        mask: BinaryMask,
        positive: str,
        negative: str,
        params: InpaintParams,
    ) -> RasterImage:
        await self._pause()
        glyph = stamp_glyph(self.target, image.width, image.height)
        return RasterImage(np.where(mask.bits[:, :, np.newaxis], glyph, image.pixels))


MOCK_REGISTRY: dict[str, tuple[BackendKind, type[MockBackend]]] = {
    BlobDetector.mock_name: (BackendKind.DETECTOR, BlobDetector),
    RectSegmenter.mock_name: (BackendKind.SEGMENTER, RectSegmenter),
    BlobSegmenter.mock_name: (BackendKind.SEGMENTER, BlobSegmenter),
    FillInpainter.mock_name: (BackendKind.INPAINTER, FillInpainter),
    IdentityInpainter.mock_name: (BackendKind.INPAINTER, IdentityInpainter),
    StampInpainter.mock_name: (BackendKind.INPAINTER, StampInpainter),
}


def create_mock(descriptor: BackendDescriptor, *, clock: Clock | None = None) -> MockBackend:
    """Build the mock a ``mock:<name>`` descriptor refers to."""
    name = descriptor.mock_name
    if name not in MOCK_REGISTRY:
        raise ValueError(f"unknown mock backend {name!r}; expected one of {sorted(MOCK_REGISTRY)}")
    kind, cls = MOCK_REGISTRY[name]
    if kind != descriptor.kind:
        raise ValueError(f"mock {name!r} is a {kind}, not a {descriptor.kind}")

    options = descriptor.options
    common = {"latency_s": descriptor.simulated_latency_s, "clock": clock}
    if cls is BlobDetector:
        return BlobDetector(
            class_label=options.get("class_label", "seal"),
            area_scale=float(options.get("area_scale", 1000.0)),
            **common,
        )
    if cls is StampInpainter:
        return StampInpainter(target=options.get("target", "boat"), **common)
    if cls is FillInpainter:
        return FillInpainter(ring_px=int(options.get("ring_px", 2)), **common)
    return cls(**common)


def ellipse_mask(width: int, height: int, ellipse: Ellipse) -> BinaryMask:
    cx, cy, rx, ry = ellipse
    ys, xs = np.mgrid[0:height, 0:width]
    return BinaryMask(((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0)


def make_blob_image(
    width: int,
    height: int,
    blobs: Sequence[Ellipse],
    *,
    background: tuple[int, int, int] = BACKGROUND_COLOR,
    color: tuple[int, int, int] = BLOB_COLOR,
) -> RasterImage:
    """Uniform background with solid red ellipses."""
    pixels = np.empty((height, width, 3), dtype=np.uint8)
    pixels[:, :] = background
    for blob in blobs:
        pixels[ellipse_mask(width, height, blob).bits] = color
    return RasterImage(pixels)


def random_blobs(
    rng: np.random.Generator,
    width: int,
    height: int,
    count: int,
    *,
    radius_range: tuple[int, int] = (12, 16),
    gap_px: int = 8,
) -> list[Ellipse]:
    """Place non-touching ellipses; gives up on a blob after 100 tries."""
    blobs: list[Ellipse] = []
    lo, hi = radius_range
    for _ in range(count):
        for _attempt in range(100):
            rx, ry = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
            if 2 * rx + 2 >= width or 2 * ry + 2 >= height:
                break
            cx = int(rng.integers(rx + 1, width - rx - 1))
            cy = int(rng.integers(ry + 1, height - ry - 1))
            if all(
                abs(cx - ox) > rx + orx + gap_px or abs(cy - oy) > ry + ory + gap_px
                for ox, oy, orx, ory in blobs
            ):
                blobs.append((cx, cy, rx, ry))
                break
    return blobs


def write_blob_dataset(
    directory: str | Path,
    n_images: int,
    *,
    seed: int = 42,
    size: tuple[int, int] = (96, 96),
    blank_images: int = 0,
    max_blobs: int = 2,
) -> Path:
    """Write ``n_images`` PNGs plus ``manifest.json``; the last ``blank_images`` have no blobs."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    width, height = size
    entries = []
    for index in range(n_images):
        image_id = f"img{index:03d}"
        count = 0 if index >= n_images - blank_images else int(rng.integers(1, max_blobs + 1))
        image = make_blob_image(width, height, random_blobs(rng, width, height, count))
        rel = f"images/{image_id}.png"
        write_image(image, directory / rel)
        entries.append({"image_id": image_id, "path": rel})
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"entries": entries}, indent=2), encoding="utf-8")
    return manifest
