"""Prompt registry for the inpainting backends.

The registry texts live in ``data/prompts.json`` and are returned verbatim.
The ``<class>`` placeholder is substituted with the detected class label.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping
from enum import StrEnum
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict

from .errors import PromptError

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"
PROMPTS_FILE = DATA_DIR / "prompts.json"

CLASS_PLACEHOLDER = "<class>"
ENVIRONMENT_PLACEHOLDER = "<environment>"

# Not part of the registry data: replacement texts are synthesized per target class.
REPLACEMENT_POSITIVE = "a realistic {target_class}, consistent lighting and perspective"


class ModelFamily(StrEnum):
    STABLE_DIFFUSION = "stable-diffusion"
    SDXL = "sdxl"
    FLUX = "flux"
    LAMA = "lama"


class PromptPurpose(StrEnum):
    REMOVAL_POSITIVE = "removal_positive"
    REMOVAL_NEGATIVE = "removal_negative"
    PER_CLASS_NEGATIVE = "per_class_negative"
    BACKGROUND_ENV = "background_env"
    BACKGROUND_NEGATIVE = "background_negative"
    REPLACEMENT_POSITIVE = "replacement_positive"


class PromptSource(StrEnum):
    REGISTRY = "registry"
    OVERRIDE = "override"
    SYNTHESIZED = "synthesized"


class PromptTemplate(BaseModel):
    model_config = ConfigDict(frozen=True)

    model_family: ModelFamily
    purpose: PromptPurpose
    text: str
    source: PromptSource = PromptSource.REGISTRY


class EnvironmentPrompt(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    description: str


class PromptPair(BaseModel):
    """Positive and negative text handed to one inpainting call."""

    model_config = ConfigDict(frozen=True)

    positive: str
    negative: str
    positive_source: PromptSource = PromptSource.REGISTRY
    negative_source: PromptSource = PromptSource.REGISTRY

    @property
    def is_registry(self) -> bool:
        return (
            self.positive_source == PromptSource.REGISTRY
            and self.negative_source == PromptSource.REGISTRY
        )


_prompts_cache: Optional[dict[str, Any]] = None
_default_registry: Optional["PromptRegistry"] = None


def load_prompts() -> dict[str, Any]:
    """Load the raw registry data from JSON."""
    global _prompts_cache
    if _prompts_cache is None:
        with open(PROMPTS_FILE, "r", encoding="utf-8") as f:
            _prompts_cache = json.load(f)
    return _prompts_cache


def load_prompt_overrides(path: str | Path) -> dict[PromptPurpose, str]:
    """Read an override file mapping purpose name to replacement text."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PromptError(f"could not read prompt overrides {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise PromptError(f"prompt overrides {path} must be a JSON object")
    overrides: dict[PromptPurpose, str] = {}
    for key, text in raw.items():
        try:
            purpose = PromptPurpose(key)
        except ValueError:
            raise PromptError(f"unknown prompt purpose in overrides: {key!r}") from None
        if not isinstance(text, str) or not text:
            raise PromptError(f"override for {key!r} must be a non-empty string")
        overrides[purpose] = text
    return overrides


class PromptRegistry:
    """Read-only lookup over the registry texts, with optional overrides."""

    def __init__(
        self,
        data: Mapping[str, Any],
        overrides: Mapping[PromptPurpose, str] | None = None,
    ) -> None:
        self._data = data
        self._overrides = dict(overrides or {})
        self._environments = [EnvironmentPrompt(**item) for item in data["environments"]]
        self._by_name = {env.name: env for env in self._environments}

    @classmethod
    def default(cls) -> PromptRegistry:
        global _default_registry
        if _default_registry is None:
            _default_registry = cls(load_prompts())
        return _default_registry

    def with_overrides(self, overrides: Mapping[PromptPurpose, str]) -> PromptRegistry:
        return PromptRegistry(self._data, {**self._overrides, **overrides})

    @property
    def overrides(self) -> dict[PromptPurpose, str]:
        return dict(self._overrides)

    def environments(self) -> list[EnvironmentPrompt]:
        return list(self._environments)

    def environment(self, name: str) -> EnvironmentPrompt:
        try:
            return self._by_name[name]
        except KeyError:
            raise PromptError(
                f"unknown environment {name!r}; expected one of {list(self._by_name)}"
            ) from None

    def template(self, model_family: ModelFamily, purpose: PromptPurpose) -> PromptTemplate:
        """Raw template for one family and purpose, before placeholder substitution."""
        family = ModelFamily(model_family)
        if purpose in self._overrides:
            return PromptTemplate(
                model_family=family,
                purpose=purpose,
                text=self._overrides[purpose],
                source=PromptSource.OVERRIDE,
            )
        if purpose == PromptPurpose.REMOVAL_POSITIVE:
            text = self._data["removal"][family]["positive"]
        elif purpose == PromptPurpose.REMOVAL_NEGATIVE:
            text = self._data["removal"][family]["negative"]
        elif purpose == PromptPurpose.PER_CLASS_NEGATIVE:
            text = "" if family == ModelFamily.LAMA else self._data["per_class_negative"]
        elif purpose == PromptPurpose.BACKGROUND_NEGATIVE:
            text = self._data["background_negative"]
        elif purpose == PromptPurpose.REPLACEMENT_POSITIVE:
            text = "" if family == ModelFamily.LAMA else REPLACEMENT_POSITIVE
            source = PromptSource.SYNTHESIZED if text else PromptSource.REGISTRY
            return PromptTemplate(model_family=family, purpose=purpose, text=text, source=source)
        else:
            raise PromptError(f"{purpose} texts are per environment; use environment()")
        return PromptTemplate(model_family=family, purpose=purpose, text=text)

    def _text(self, family: ModelFamily, purpose: PromptPurpose) -> tuple[str, PromptSource]:
        template = self.template(family, purpose)
        if not template.text:
            logger.info("no %s prompt is defined for %s; sending an empty string", purpose, family)
        return template.text, template.source

    def get_prompt(
        self,
        model_family: ModelFamily,
        purpose: PromptPurpose,
        class_label: str | None = None,
        environment: str | None = None,
    ) -> PromptPair:
        """Return the (positive, negative) pair for one inpainting purpose."""
        family = ModelFamily(model_family)
        purpose = PromptPurpose(purpose)

        if purpose in (PromptPurpose.REMOVAL_POSITIVE, PromptPurpose.REMOVAL_NEGATIVE):
            pos, pos_src = self._text(family, PromptPurpose.REMOVAL_POSITIVE)
            neg, neg_src = self._text(family, PromptPurpose.REMOVAL_NEGATIVE)
            return PromptPair(positive=pos, negative=neg, positive_source=pos_src, negative_source=neg_src)

        if purpose == PromptPurpose.PER_CLASS_NEGATIVE:
            if not class_label:
                raise PromptError("per_class_negative needs a class_label")
            neg, neg_src = self._text(family, purpose)
            return PromptPair(
                positive="",
                negative=neg.replace(CLASS_PLACEHOLDER, class_label),
                negative_source=neg_src,
            )

        if purpose == PromptPurpose.BACKGROUND_NEGATIVE:
            neg, neg_src = self._text(family, purpose)
            return PromptPair(positive="", negative=neg, negative_source=neg_src)

        if purpose == PromptPurpose.BACKGROUND_ENV:
            if not environment:
                raise PromptError("background_env needs an environment name")
            env = self.environment(environment)
            neg, neg_src = self._text(family, PromptPurpose.BACKGROUND_NEGATIVE)
            if purpose in self._overrides:
                positive = self._overrides[purpose].replace(ENVIRONMENT_PLACEHOLDER, env.name)
                return PromptPair(
                    positive=positive,
                    negative=neg,
                    positive_source=PromptSource.OVERRIDE,
                    negative_source=neg_src,
                )
            return PromptPair(positive=env.description, negative=neg, negative_source=neg_src)

        raise PromptError(f"use replacement_prompt() for {purpose}")

    def replacement_prompt(
        self, model_family: ModelFamily, target_class: str, original_class: str
    ) -> PromptPair:
        """Positive text naming the target class; negative suppresses the original class."""
        family = ModelFamily(model_family)
        template = self.template(family, PromptPurpose.REPLACEMENT_POSITIVE)
        positive = template.text.replace("{target_class}", target_class)
        negative = self.get_prompt(family, PromptPurpose.PER_CLASS_NEGATIVE, class_label=original_class)
        return PromptPair(
            positive=positive,
            negative=negative.negative,
            positive_source=template.source,
            negative_source=negative.negative_source,
        )


def get_prompt(
    model_family: ModelFamily,
    purpose: PromptPurpose,
    class_label: str | None = None,
    environment: str | None = None,
) -> PromptPair:
    return PromptRegistry.default().get_prompt(model_family, purpose, class_label, environment)


def list_environments() -> list[EnvironmentPrompt]:
    """All background environments in registry order."""
    return PromptRegistry.default().environments()
