"""Mask geometry: box rasterization, union, padding, feathering, thresholding,
resizing and alpha compositing.

Every function is pure and returns a new value.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import BBox, BinaryMask, RasterImage, SoftMask, clamp_bbox, require_same_size

logger = logging.getLogger(__name__)

# Float residue below this is snapped to the alpha endpoints.
_ALPHA_SNAP = 1e-9


@dataclass(frozen=True)
class StructuringElement:
    """Square (Chebyshev) element of the given radius; side length 2r + 1."""

    radius_px: int

    def __post_init__(self) -> None:
        if self.radius_px < 0:
            raise ValueError("radius_px must be >= 0")

    @property
    def size(self) -> int:
        return 2 * self.radius_px + 1


def bbox_to_mask(bbox: BBox, width: int, height: int) -> BinaryMask:
    """Rasterize an (x, y, w, h) box, clamped to the image."""
    if width < 1 or height < 1:
        raise ValueError("width and height must be at least 1")
    bits = np.zeros((height, width), dtype=bool)
    box = clamp_bbox(bbox, width, height)
    if box is None:
        logger.warning("bbox %s lies outside a %dx%d image; mask is empty", list(bbox), width, height)
        return BinaryMask(bits)
    x, y, w, h = box
    bits[y : y + h, x : x + w] = True
    return BinaryMask(bits)


def union(masks: Sequence[BinaryMask]) -> BinaryMask:
    if not masks:
        raise ValueError("union needs at least one mask")
    require_same_size(*masks)
    return BinaryMask(np.logical_or.reduce([m.bits for m in masks]))


def pad(mask: BinaryMask, radius_px: int) -> BinaryMask:
    """Dilate with a square structuring element; pixels beyond the border count as false."""
    element = StructuringElement(radius_px)
    if element.radius_px == 0:
        return mask
    dilated = ndimage.maximum_filter(
        mask.bits.astype(np.uint8), size=element.size, mode="constant", cval=0
    )
    return BinaryMask(dilated.astype(bool))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D Gaussian, truncated at ceil(3 * sigma) and renormalized to sum 1."""
    if sigma <= 0:
        return np.ones(1, dtype=np.float64)
    half = math.ceil(3.0 * sigma)
    x = np.arange(-half, half + 1, dtype=np.float64)
    kernel = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def _snap(alpha: np.ndarray) -> np.ndarray:
    alpha = np.clip(alpha, 0.0, 1.0)
    alpha[alpha < _ALPHA_SNAP] = 0.0
    alpha[alpha > 1.0 - _ALPHA_SNAP] = 1.0
    return alpha


def feather(mask: BinaryMask, blur_radius_px: float) -> SoftMask:
    """Soften a binary mask with a Gaussian of sigma = blur_radius_px (reflect borders)."""
    if blur_radius_px < 0:
        raise ValueError("blur_radius_px must be >= 0")
    field = mask.bits.astype(np.float64)
    if blur_radius_px == 0:
        return SoftMask(field)
    kernel = gaussian_kernel(blur_radius_px)
    blurred = ndimage.correlate1d(field, kernel, axis=0, mode="reflect")
    blurred = ndimage.correlate1d(blurred, kernel, axis=1, mode="reflect")
    return SoftMask(_snap(blurred))


def threshold(soft: SoftMask, t: float) -> BinaryMask:
    """bit = alpha >= t."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {t}")
    return BinaryMask(soft.alpha >= t)


def _nearest_indices(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst) * src) // dst


def resize_mask(mask: BinaryMask | SoftMask, new_width: int, new_height: int) -> BinaryMask | SoftMask:
    """Nearest-neighbor for binary masks, bilinear for soft masks."""
    if new_width < 1 or new_height < 1:
        raise ValueError("target dimensions must be at least 1x1")
    if mask.size == (new_width, new_height):
        return mask
    if isinstance(mask, BinaryMask):
        rows = _nearest_indices(mask.height, new_height)
        cols = _nearest_indices(mask.width, new_width)
        return BinaryMask(mask.bits[np.ix_(rows, cols)])
    field = Image.fromarray(mask.alpha.astype(np.float32))
    resized = np.asarray(field.resize((new_width, new_height), Image.Resampling.BILINEAR))
    return SoftMask(_snap(resized.astype(np.float64)))


def composite(foreground: RasterImage, alpha: SoftMask, background: RasterImage) -> RasterImage:
    """out = round(alpha * fg + (1 - alpha) * bg) per channel, half away from zero."""
    require_same_size(foreground, alpha, background)
    a = alpha.alpha[:, :, np.newaxis]
    blended = a * foreground.pixels.astype(np.float64) + (1.0 - a) * background.pixels.astype(
        np.float64
    )
    # Values are non-negative, so floor(x + 0.5) rounds half away from zero.
    out = np.clip(np.floor(blended + 0.5), 0, 255).astype(np.uint8)
    return RasterImage(out)
