"""Run configuration loaded from TOML or JSON."""

from __future__ import annotations

import json
import logging
import tomllib
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .backends import BackendDescriptor, BackendKind, InpaintParams
from .errors import ConfigError
from .perturb import ALL_ENVIRONMENTS, CANVAS_GRAY, DEFAULT_TAU, MaskMode, PerturbationKind, PerturbationSpec
from .prompts import ModelFamily, PromptRegistry, load_prompt_overrides

logger = logging.getLogger(__name__)

_PATH_KEYS = ("manifest", "cache_dir", "output_dir", "prompt_overrides")


class BackendsConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    detector: BackendDescriptor
    segmenter: BackendDescriptor
    inpainter: BackendDescriptor

    @model_validator(mode="before")
    @classmethod
    def _fill_kinds(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        filled = dict(data)
        for kind in BackendKind:
            entry = filled.get(str(kind))
            if isinstance(entry, dict) and "kind" not in entry:
                filled[str(kind)] = {**entry, "kind": str(kind)}
        return filled

    @model_validator(mode="after")
    def _check_kinds(self) -> BackendsConfig:
        for kind in BackendKind:
            descriptor: BackendDescriptor = getattr(self, str(kind))
            if descriptor.kind != kind:
                raise ValueError(f"backends.{kind} has kind {descriptor.kind}")
        return self


def _default_specs() -> list[PerturbationSpec]:
    return [PerturbationSpec(kind=PerturbationKind.REMOVAL)]


class RunConfig(BaseModel):
    """Everything one experiment run needs."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    manifest: Path
    backends: BackendsConfig
    tau: float = Field(default=DEFAULT_TAU, ge=0.0, le=1.0)
    seed: int = 42
    perturbations: list[PerturbationSpec] = Field(default_factory=_default_specs, min_length=1)
    sweep: dict[str, list[Any]] | None = None
    workers: int = Field(default=4, ge=1)
    cache_dir: Path = Path(".perturbex-cache")
    output_dir: Path = Path("runs/latest")
    model_family: ModelFamily = ModelFamily.STABLE_DIFFUSION
    inpaint: dict[str, Any] = Field(default_factory=dict)
    resize_to_model: bool = True
    restore_unmasked: bool = True
    blank_canvas_color: tuple[int, int, int] = CANVAS_GRAY
    prompt_overrides: Path | None = None
    progress: bool = False
    simulated_clock: bool = False

    @field_validator("sweep")
    @classmethod
    def _non_empty_grid(cls, grid: dict[str, list[Any]] | None) -> dict[str, list[Any]] | None:
        if grid:
            for name, values in grid.items():
                if not values:
                    raise ValueError(f"sweep grid for {name!r} has no values")
        return grid

    @field_validator("blank_canvas_color")
    @classmethod
    def _rgb(cls, color: tuple[int, int, int]) -> tuple[int, int, int]:
        if not all(0 <= c <= 255 for c in color):
            raise ValueError(f"blank_canvas_color must be RGB8, got {color}")
        return color

    @model_validator(mode="after")
    def _check_inpaint_overrides(self) -> RunConfig:
        unknown = set(self.inpaint) - set(InpaintParams.model_fields)
        if unknown:
            raise ValueError(f"unknown inpaint parameters: {sorted(unknown)}")
        return self

    def with_overrides(
        self,
        *,
        mask_mode: MaskMode | str | None = None,
        tau: float | None = None,
        seed: int | None = None,
        **fields: Any,
    ) -> RunConfig:
        """A re-validated copy; CLI flags beat file values."""
        data = self.model_dump(exclude_unset=True)
        if mask_mode is not None:
            data["perturbations"] = [
                {**spec.model_dump(exclude_unset=True), "mask_mode": str(mask_mode)}
                for spec in self.perturbations
            ]
        if tau is not None:
            data["tau"] = tau
        if seed is not None:
            data["seed"] = seed
        data.update(fields)
        try:
            return RunConfig.model_validate(data)
        except ValidationError as exc:
            raise ConfigError(f"invalid override: {_first_error(exc)}") from exc

    def prompt_registry(self) -> PromptRegistry:
        registry = PromptRegistry.default()
        if self.prompt_overrides is None:
            return registry
        return registry.with_overrides(load_prompt_overrides(self.prompt_overrides))

    def inpaint_params_for(self, spec: PerturbationSpec, family: ModelFamily) -> InpaintParams:
        """Family defaults, then run-level overrides, then the spec's own, then the run seed."""
        values: dict[str, Any] = InpaintParams.for_family(family).model_dump()
        values.update(self.inpaint)
        explicit = spec.inpaint_params.model_fields_set if "inpaint_params" in spec.model_fields_set else set()
        values.update({name: getattr(spec.inpaint_params, name) for name in explicit})
        values["seed"] = self.seed
        if not self.resize_to_model:
            values["target_resolution"] = None
        try:
            return InpaintParams(**values)
        except ValidationError as exc:
            raise ConfigError(f"invalid inpaint parameters: {_first_error(exc)}") from exc

    def resolved_specs(self, registry: PromptRegistry | None = None) -> list[PerturbationSpec]:
        """Specs with "all" environments expanded and parameters filled in."""
        registry = registry or self.prompt_registry()
        known = [env.name for env in registry.environments()]
        resolved: list[PerturbationSpec] = []
        seen: set[str] = set()
        for spec in self.perturbations:
            family = spec.model_family or self.model_family
            environments: list[str | None] = [spec.environment]
            if spec.kind == PerturbationKind.BACKGROUND:
                if spec.environment == ALL_ENVIRONMENTS:
                    environments = list(known)
                elif spec.environment not in known:
                    raise ConfigError(
                        f"unknown environment {spec.environment!r}; expected one of {known}"
                    )
            params = self.inpaint_params_for(spec, family)
            for env in environments:
                item = spec.model_copy(
                    update={"environment": env, "model_family": family, "inpaint_params": params}
                )
                if item.label in seen:
                    raise ConfigError(
                        f"two perturbations share the condition {item.label!r}; give one a name"
                    )
                seen.add(item.label)
                resolved.append(item)
        return resolved

    def effective(self) -> dict[str, Any]:
        return self.model_dump(mode="json")


def _first_error(exc: ValidationError) -> str:
    err = exc.errors()[0]
    location = ".".join(str(part) for part in err["loc"])
    return f"{location}: {err['msg']}" if location else err["msg"]


def _resolve_paths(raw: dict[str, Any], base: Path) -> dict[str, Any]:
    resolved = dict(raw)
    for key in _PATH_KEYS:
        value = resolved.get(key)
        if isinstance(value, str) and not Path(value).is_absolute():
            resolved[key] = str(base / value)
    return resolved


def load_run_config(path: str | Path) -> RunConfig:
    """Parse a run config; relative paths resolve against the file's directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.suffix == ".toml":
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        elif path.suffix == ".json":
            raw = json.loads(path.read_text(encoding="utf-8"))
        else:
            raise ConfigError(f"unsupported config format {path.suffix!r}; use .toml or .json")
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a table/object")

    try:
        config = RunConfig.model_validate(_resolve_paths(raw, path.parent))
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}: {_first_error(exc)}") from exc
    config.resolved_specs()
    logger.debug("loaded run config %s", path)
    return config
