"""Domain types, dataset manifest loading and raster I/O.

Images are ``(height, width, 3)`` uint8 arrays, binary masks ``(height, width)``
bool arrays and soft masks ``(height, width)`` float64 arrays in [0, 1]. All
three are wrapped in frozen dataclasses whose arrays are marked read-only, so a
value can be handed to any number of concurrent tasks.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import DimensionMismatchError, ImageIOError, ManifestError, UnsupportedFormatError

logger = logging.getLogger(__name__)

BBox = tuple[int, int, int, int]

SUPPORTED_READ_FORMATS = frozenset({"PNG", "JPEG", "TIFF", "BMP"})


def _frozen(array: np.ndarray) -> np.ndarray:
    out = np.array(array, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class RasterImage:
    """RGB8 pixel grid, row-major."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.pixels)
        if arr.dtype != np.uint8:
            raise ValueError(f"image pixels must be uint8, got {arr.dtype}")
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"image pixels must have shape (h, w, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image dimensions must be at least 1x1")
        object.__setattr__(self, "pixels", _frozen(arr))

    @classmethod
    def filled(cls, width: int, height: int, color: tuple[int, int, int]) -> RasterImage:
        pixels = np.empty((height, width, 3), dtype=np.uint8)
        pixels[:, :] = color
        return cls(pixels)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RasterImage):
            return NotImplemented
        return bool(np.array_equal(self.pixels, other.pixels))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Per-pixel edit region; True marks editable / foreground pixels."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.bits)
        if arr.ndim != 2:
            raise ValueError(f"mask bits must have shape (h, w), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("mask dimensions must be at least 1x1")
        object.__setattr__(self, "bits", _frozen(arr.astype(bool)))

    @classmethod
    def empty(cls, width: int, height: int) -> BinaryMask:
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, width: int, height: int) -> BinaryMask:
        return cls(np.ones((height, width), dtype=bool))

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def is_empty(self) -> bool:
        return not bool(self.bits.any())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return bool(np.array_equal(self.bits, other.bits))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class SoftMask:
    """Real-valued alpha in [0, 1] used for compositing."""

    alpha: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.alpha, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"alpha must have shape (h, w), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("mask dimensions must be at least 1x1")
        if np.isnan(arr).any() or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("alpha values must lie in [0, 1]")
        object.__setattr__(self, "alpha", _frozen(arr))

    @classmethod
    def from_binary(cls, mask: BinaryMask) -> SoftMask:
        return cls(mask.bits.astype(np.float64))

    @property
    def width(self) -> int:
        return int(self.alpha.shape[1])

    @property
    def height(self) -> int:
        return int(self.alpha.shape[0])

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    def is_empty(self) -> bool:
        return not bool((self.alpha > 0.0).any())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SoftMask):
            return NotImplemented
        return bool(np.array_equal(self.alpha, other.alpha))

    __hash__ = None  # type: ignore[assignment]


def require_same_size(*items: RasterImage | BinaryMask | SoftMask) -> tuple[int, int]:
    """Return the shared (width, height) or raise DimensionMismatchError."""
    sizes = {item.size for item in items}
    if len(sizes) != 1:
        raise DimensionMismatchError(f"dimension mismatch: {sorted(sizes)}")
    return sizes.pop()


def clamp_bbox(bbox: BBox, width: int, height: int) -> BBox | None:
    """Clip an (x, y, w, h) box to the image; None when nothing is left."""
    x, y, w, h = bbox
    x0, y0 = max(0, x), max(0, y)
    x1, y1 = min(width, x + w), min(height, y + h)
    if x1 <= x0 or y1 <= y0:
        return None
    return x0, y0, x1 - x0, y1 - y0


class Detection(BaseModel):
    """One detector output: class label, pixel box and confidence."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    class_label: str = Field(alias="class")
    bbox: BBox
    confidence: float = Field(ge=0.0, le=1.0)

    @field_validator("bbox")
    @classmethod
    def _positive_extent(cls, value: BBox) -> BBox:
        if value[2] <= 0 or value[3] <= 0:
            raise ValueError(f"bbox width and height must be positive, got {list(value)}")
        return value

    def clamped(self, width: int, height: int) -> Detection | None:
        box = clamp_bbox(self.bbox, width, height)
        if box is None:
            return None
        if box == self.bbox:
            return self
        return self.model_copy(update={"bbox": box})

    def to_wire(self) -> dict[str, Any]:
        return self.model_dump(mode="json", by_alias=True)


def sort_detections(detections: list[Detection]) -> list[Detection]:
    """Descending confidence; ties broken by box position for a stable order."""
    return sorted(detections, key=lambda d: (-d.confidence, d.bbox[1], d.bbox[0], d.class_label))


class ManifestEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    image_id: str = Field(min_length=1)
    path: Path
    annotations: tuple[Detection, ...] | None = None


class DatasetManifest(BaseModel):
    model_config = ConfigDict(frozen=True)

    entries: tuple[ManifestEntry, ...] = ()
    source: Path | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def image_ids(self) -> list[str]:
        return [entry.image_id for entry in self.entries]


def _image_size(path: Path) -> tuple[int, int] | None:
    try:
        with Image.open(path) as img:
            return img.size
    except (OSError, UnidentifiedImageError):
        return None


def _clamp_annotations(
    image_id: str, path: Path, annotations: list[Detection]
) -> tuple[Detection, ...]:
    size = _image_size(path)
    if size is None:
        return tuple(annotations)
    kept: list[Detection] = []
    for det in annotations:
        clamped = det.clamped(*size)
        if clamped is None:
            logger.warning("dropping annotation outside %s bounds: %s", image_id, list(det.bbox))
            continue
        if clamped is not det:
            logger.warning(
                "clamped annotation for %s from %s to %s",
                image_id,
                list(det.bbox),
                list(clamped.bbox),
            )
        kept.append(clamped)
    return tuple(kept)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and validate a dataset manifest, preserving entry order."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest not found: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"could not parse manifest {path}: {exc}") from exc

    if not isinstance(raw, dict) or not isinstance(raw.get("entries"), list):
        raise ManifestError(f"manifest {path} must be an object with an 'entries' list")

    base = path.parent
    seen: set[str] = set()
    entries: list[ManifestEntry] = []
    for index, item in enumerate(raw["entries"]):
        if not isinstance(item, dict):
            raise ManifestError("entry must be an object", index=index)
        image_id = item.get("image_id")
        rel_path = item.get("path")
        if not isinstance(image_id, str) or not image_id:
            raise ManifestError("missing or empty 'image_id'", index=index)
        if not isinstance(rel_path, str) or not rel_path:
            raise ManifestError(f"missing 'path' for {image_id!r}", index=index)
        if image_id in seen:
            raise ManifestError(f"duplicate image_id {image_id!r}", index=index)
        seen.add(image_id)

        image_path = Path(rel_path)
        if not image_path.is_absolute():
            image_path = base / image_path
        if not image_path.exists():
            raise ManifestError(f"image path not found for {image_id!r}: {image_path}", index=index)

        annotations: tuple[Detection, ...] | None = None
        if item.get("annotations") is not None:
            try:
                parsed = [Detection.model_validate(a) for a in item["annotations"]]
            except (ValidationError, TypeError) as exc:
                raise ManifestError(
                    f"malformed annotation for {image_id!r}: {exc}", index=index
                ) from exc
            annotations = _clamp_annotations(image_id, image_path, parsed)

        entries.append(ManifestEntry(image_id=image_id, path=image_path, annotations=annotations))

    logger.debug("loaded manifest %s with %d entries", path, len(entries))
    return DatasetManifest(entries=tuple(entries), source=path)


def read_image(path: str | Path) -> RasterImage:
    """Read a raster file as RGB8."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.format not in SUPPORTED_READ_FORMATS:
                raise UnsupportedFormatError(f"unsupported image format {img.format!r}: {path}")
            pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError as exc:
        raise ImageIOError(f"image not found: {path}") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageIOError(f"unreadable image file: {path}") from exc
    if pixels.shape[0] == 0 or pixels.shape[1] == 0:
        raise ImageIOError(f"image has a zero dimension: {path}")
    return RasterImage(pixels)


def _check_png_target(path: Path) -> None:
    if path.suffix.lower() != ".png":
        raise UnsupportedFormatError(f"only PNG output is supported, got {path.name}")
    if not path.parent.is_dir():
        raise ImageIOError(f"output directory does not exist: {path.parent}")


def write_image(image: RasterImage, path: str | Path) -> None:
    path = Path(path)
    _check_png_target(path)
    path.write_bytes(encode_png(image))


def encode_png(image: RasterImage) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(image.pixels).save(buffer, format="PNG")
    return buffer.getvalue()


def decode_png(data: bytes) -> RasterImage:
    try:
        with Image.open(io.BytesIO(data)) as img:
            return RasterImage(np.asarray(img.convert("RGB"), dtype=np.uint8))
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageIOError("could not decode PNG payload") from exc


def mask_to_gray(mask: BinaryMask | SoftMask) -> np.ndarray:
    """8-bit grayscale: 0/255 for binary masks, round(alpha * 255) for soft masks."""
    if isinstance(mask, BinaryMask):
        return np.where(mask.bits, 255, 0).astype(np.uint8)
    return np.floor(mask.alpha * 255.0 + 0.5).astype(np.uint8)


def encode_mask_png(mask: BinaryMask | SoftMask) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(mask_to_gray(mask)).save(buffer, format="PNG")
    return buffer.getvalue()


def _decode_gray(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as img:
            return np.asarray(img.convert("L"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageIOError("could not decode mask PNG payload") from exc


def decode_binary_mask_png(data: bytes) -> BinaryMask:
    return BinaryMask(_decode_gray(data) >= 128)


def decode_soft_mask_png(data: bytes) -> SoftMask:
    return SoftMask(_decode_gray(data).astype(np.float64) / 255.0)


def write_mask(mask: BinaryMask | SoftMask, path: str | Path) -> None:
    path = Path(path)
    _check_png_target(path)
    path.write_bytes(encode_mask_png(mask))


def read_binary_mask(path: str | Path) -> BinaryMask:
    try:
        return decode_binary_mask_png(Path(path).read_bytes())
    except FileNotFoundError as exc:
        raise ImageIOError(f"mask not found: {path}") from exc


def read_soft_mask(path: str | Path) -> SoftMask:
    try:
        return decode_soft_mask_png(Path(path).read_bytes())
    except FileNotFoundError as exc:
        raise ImageIOError(f"mask not found: {path}") from exc


def resize_image(image: RasterImage, width: int, height: int) -> RasterImage:
    """Bilinear resize; identity when the size already matches."""
    if width < 1 or height < 1:
        raise ValueError("target dimensions must be at least 1x1")
    if image.size == (width, height):
        return image
    resized = Image.fromarray(image.pixels).resize((width, height), Image.Resampling.BILINEAR)
    return RasterImage(np.asarray(resized, dtype=np.uint8))
