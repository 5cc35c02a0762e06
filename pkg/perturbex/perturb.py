"""The three interventions: object removal, object replacement and background
replacement.

Each intervention takes the image, a :class:`PerturbationSpec` and an
:class:`EditMask` produced by :func:`build_edit_mask`, and returns a
:class:`PerturbedImage`. Backend failures are re-raised as
:class:`~perturbex.errors.PerturbationError` carrying the image id and spec.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from enum import StrEnum
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .backends import BackendSet, InpaintParams, Segmenter, inpaint, segment
from .core import BinaryMask, Detection, RasterImage, SoftMask, sort_detections
from .errors import BackendError, NotApplicableError, PerturbationError
from .maskops import bbox_to_mask, composite, feather, pad, threshold, union
from .prompts import ModelFamily, PromptPair, PromptPurpose, PromptRegistry

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.40
CANVAS_GRAY = (128, 128, 128)
# Cut-off turning the feathered alpha back into the binary mask sent to inpainting.
BINARY_CUTOFF = 0.5
ALL_ENVIRONMENTS = "all"


class PerturbationKind(StrEnum):
    REMOVAL = "removal"
    REPLACEMENT = "replacement"
    BACKGROUND = "background"


class MaskMode(StrEnum):
    SEGMENTATION = "segmentation"
    BBOX = "bbox"


class MaskScope(StrEnum):
    UNION = "union"
    PER_DETECTION = "per_detection"


# Background compositing pads by 3 px and feathers with radius 1; the object
# edits use the raw binary mask unless configured otherwise.
_DEFAULT_PAD = {PerturbationKind.BACKGROUND: 3}
_DEFAULT_FEATHER = {PerturbationKind.BACKGROUND: 1.0}


class PerturbationSpec(BaseModel):
    """One planned edit."""

    model_config = ConfigDict(frozen=True)

    kind: PerturbationKind
    target_class: str | None = None
    environment: str | None = None
    mask_mode: MaskMode = MaskMode.SEGMENTATION
    mask_scope: MaskScope = MaskScope.UNION
    detection_index: int | None = Field(default=None, ge=0)
    pad_px: int | None = Field(default=None, ge=0)
    feather_radius: float | None = Field(default=None, ge=0.0)
    inpaint_params: InpaintParams = InpaintParams()
    model_family: ModelFamily | None = None
    name: str | None = None

    @model_validator(mode="after")
    def _check_kind_arguments(self) -> PerturbationSpec:
        if self.kind == PerturbationKind.REPLACEMENT and not self.target_class:
            raise ValueError("replacement needs a target_class")
        if self.kind != PerturbationKind.REPLACEMENT and self.target_class:
            raise ValueError(f"target_class only applies to replacement, not {self.kind}")
        if self.kind == PerturbationKind.BACKGROUND and not self.environment:
            raise ValueError("background replacement needs an environment")
        if self.kind != PerturbationKind.BACKGROUND and self.environment:
            raise ValueError(f"environment only applies to background, not {self.kind}")
        if self.mask_scope == MaskScope.PER_DETECTION and self.detection_index is None:
            raise ValueError("per_detection scope needs a detection_index")
        if self.mask_scope == MaskScope.UNION and self.detection_index is not None:
            raise ValueError("detection_index only applies to per_detection scope")
        return self

    @property
    def effective_pad_px(self) -> int:
        if self.pad_px is not None:
            return self.pad_px
        return _DEFAULT_PAD.get(self.kind, 0)

    @property
    def effective_feather_radius(self) -> float:
        if self.feather_radius is not None:
            return self.feather_radius
        return _DEFAULT_FEATHER.get(self.kind, 0.0)

    @property
    def condition(self) -> str:
        """Group label for metrics; environments of one background spec share it."""
        if self.name:
            return self.name
        parts = [str(self.kind)]
        if self.target_class:
            parts.append(self.target_class)
        parts.append(str(self.mask_mode))
        if self.mask_scope == MaskScope.PER_DETECTION:
            parts.append(f"det{self.detection_index}")
        return "-".join(parts)

    @property
    def label(self) -> str:
        if self.environment:
            return f"{self.condition}/{self.environment}"
        return self.condition

    def summary(self) -> dict[str, Any]:
        data = self.model_dump(mode="json", exclude_none=True)
        data["effective_pad_px"] = self.effective_pad_px
        data["effective_feather_radius"] = self.effective_feather_radius
        return data

    def spec_hash(self) -> str:
        payload = json.dumps(self.summary(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class EditMask:
    raw: BinaryMask
    binary: BinaryMask
    soft: SoftMask
    detections: tuple[Detection, ...]


@dataclass(frozen=True)
class PerturbedImage:
    image: RasterImage
    spec: PerturbationSpec
    edit_mask: EditMask
    prompts: PromptPair
    background: RasterImage | None = None


def select_detections(
    detections: list[Detection], spec: PerturbationSpec, tau: float
) -> list[Detection]:
    """Detections at or above tau, narrowed to one index for per-detection scope."""
    above = [d for d in sort_detections(detections) if d.confidence >= tau]
    if not above:
        raise NotApplicableError(f"no detections at or above tau={tau}")
    if spec.mask_scope == MaskScope.PER_DETECTION:
        assert spec.detection_index is not None
        if spec.detection_index >= len(above):
            raise NotApplicableError(
                f"detection_index {spec.detection_index} out of range for {len(above)} detections"
            )
        return [above[spec.detection_index]]
    return above


async def build_edit_mask(
    detections: list[Detection],
    spec: PerturbationSpec,
    segmenter: Segmenter,
    image: RasterImage,
    *,
    tau: float = DEFAULT_TAU,
) -> EditMask:
    """Raw union mask, then binary = threshold(feather(pad(raw)), 0.5) and soft = feather(pad(raw))."""
    chosen = select_detections(detections, spec, tau)
    boxes = [d.bbox for d in chosen]
    if spec.mask_mode == MaskMode.BBOX:
        masks = [bbox_to_mask(box, image.width, image.height) for box in boxes]
    else:
        masks = await segment(segmenter, image, boxes)
    raw = union(masks)
    if raw.is_empty():
        raise NotApplicableError("edit mask is empty")
    soft = feather(pad(raw, spec.effective_pad_px), spec.effective_feather_radius)
    binary = threshold(soft, BINARY_CUTOFF)
    return EditMask(raw=raw, binary=binary, soft=soft, detections=tuple(chosen))


def blank_canvas(
    width: int, height: int, color: tuple[int, int, int] = CANVAS_GRAY
) -> RasterImage:
    if width < 1 or height < 1:
        raise ValueError("canvas dimensions must be at least 1x1")
    return RasterImage.filled(width, height, color)


def _family(spec: PerturbationSpec, backends: BackendSet) -> ModelFamily:
    return spec.model_family or backends.model_family


async def _inpaint_with_context(
    backends: BackendSet,
    image: RasterImage,
    mask: BinaryMask,
    prompts: PromptPair,
    spec: PerturbationSpec,
    *,
    image_id: str | None,
    restore: bool,
) -> RasterImage:
    try:
        return await inpaint(
            backends.inpainter,
            image,
            mask,
            prompts.positive,
            prompts.negative,
            spec.inpaint_params,
            restore=restore,
        )
    except BackendError as exc:
        raise PerturbationError(str(exc), image_id=image_id, spec_label=spec.label) from exc


async def remove(
    image: RasterImage,
    spec: PerturbationSpec,
    backends: BackendSet,
    edit_mask: EditMask,
    *,
    registry: PromptRegistry | None = None,
    image_id: str | None = None,
    restore: bool = True,
) -> PerturbedImage:
    """Fill the masked objects with plausible background."""
    if edit_mask.binary.is_empty():
        raise NotApplicableError("removal mask is empty")
    registry = registry or PromptRegistry.default()
    prompts = registry.get_prompt(_family(spec, backends), PromptPurpose.REMOVAL_POSITIVE)
    out = await _inpaint_with_context(
        backends, image, edit_mask.binary, prompts, spec, image_id=image_id, restore=restore
    )
    return PerturbedImage(image=out, spec=spec, edit_mask=edit_mask, prompts=prompts)


async def replace(
    image: RasterImage,
    spec: PerturbationSpec,
    backends: BackendSet,
    edit_mask: EditMask,
    *,
    registry: PromptRegistry | None = None,
    image_id: str | None = None,
    restore: bool = True,
) -> PerturbedImage:
    """Substitute the masked objects with the spec's target class."""
    if edit_mask.binary.is_empty():
        raise NotApplicableError("replacement mask is empty")
    assert spec.target_class is not None
    registry = registry or PromptRegistry.default()
    # every class under the mask, highest confidence first
    original_class = ", ".join(dict.fromkeys(d.class_label for d in edit_mask.detections))
    prompts = registry.replacement_prompt(_family(spec, backends), spec.target_class, original_class)
    out = await _inpaint_with_context(
        backends, image, edit_mask.binary, prompts, spec, image_id=image_id, restore=restore
    )
    return PerturbedImage(image=out, spec=spec, edit_mask=edit_mask, prompts=prompts)


async def generate_background(
    image: RasterImage,
    spec: PerturbationSpec,
    backends: BackendSet,
    *,
    registry: PromptRegistry | None = None,
    image_id: str | None = None,
    canvas_color: tuple[int, int, int] = CANVAS_GRAY,
) -> tuple[RasterImage, PromptPair]:
    """Generate a new scene of the image's size from a blank canvas."""
    assert spec.environment is not None
    registry = registry or PromptRegistry.default()
    prompts = registry.get_prompt(
        _family(spec, backends), PromptPurpose.BACKGROUND_ENV, environment=spec.environment
    )
    canvas = blank_canvas(image.width, image.height, canvas_color)
    background = await _inpaint_with_context(
        backends,
        canvas,
        BinaryMask.full(image.width, image.height),
        prompts,
        spec,
        image_id=image_id,
        restore=True,
    )
    return background, prompts


async def replace_background(
    image: RasterImage,
    spec: PerturbationSpec,
    backends: BackendSet,
    edit_mask: EditMask,
    *,
    registry: PromptRegistry | None = None,
    image_id: str | None = None,
    canvas_color: tuple[int, int, int] = CANVAS_GRAY,
) -> PerturbedImage:
    """Composite the original objects over a generated background."""
    if edit_mask.soft.is_empty():
        raise NotApplicableError("foreground alpha is empty")
    background, prompts = await generate_background(
        image, spec, backends, registry=registry, image_id=image_id, canvas_color=canvas_color
    )
    out = composite(image, edit_mask.soft, background)
    return PerturbedImage(
        image=out, spec=spec, edit_mask=edit_mask, prompts=prompts, background=background
    )


async def apply_perturbation(
    image: RasterImage,
    spec: PerturbationSpec,
    backends: BackendSet,
    edit_mask: EditMask,
    *,
    registry: PromptRegistry | None = None,
    image_id: str | None = None,
    restore: bool = True,
    canvas_color: tuple[int, int, int] = CANVAS_GRAY,
) -> PerturbedImage:
    if spec.kind == PerturbationKind.REMOVAL:
        return await remove(
            image, spec, backends, edit_mask, registry=registry, image_id=image_id, restore=restore
        )
    if spec.kind == PerturbationKind.REPLACEMENT:
        return await replace(
            image, spec, backends, edit_mask, registry=registry, image_id=image_id, restore=restore
        )
    return await replace_background(
        image,
        spec,
        backends,
        edit_mask,
        registry=registry,
        image_id=image_id,
        canvas_color=canvas_color,
    )
