"""Experiment orchestration.

``run`` drives every manifest image through detect → filter by tau → edit
mask (segmentations cached) → perturbation → re-detect, collects one
:class:`OutcomeRecord` per (image, spec), and writes the run directory::

    records.jsonl  summary.json  summary.csv  timings.csv  effective_config.json
    artifacts/<image_id>/<spec_hash>/{original,mask,perturbed}.png

``sweep`` expands an inpainting parameter grid into one run per combination
and ``compare_mask_modes`` times segmentation against bounding-box masks.
"""

from __future__ import annotations

import asyncio
import csv
import itertools
import json
import logging
import tempfile
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import httpx
import numpy as np
from pydantic import BaseModel, ConfigDict
from tqdm import tqdm

from . import SCHEMA_VERSION, __version__
from .backends import (
    BackendSet,
    BackendStatus,
    Segmenter,
    build_backend_set,
    detect,
    segment,
)
from .cache import ArtifactCache, CacheKey
from .config import RunConfig
from .core import (
    BBox,
    BinaryMask,
    Detection,
    ManifestEntry,
    RasterImage,
    load_manifest,
    read_image,
    write_image,
    write_mask,
)
from .errors import BackendError, ConfigError, NotApplicableError, PerturbexError, SweepError
from .maskops import composite
from .metrics import (
    STD_CONVENTION,
    MetricsSummary,
    OutcomeRecord,
    count_at_or_above,
    read_records,
    summarize,
    thresholded_top_confidence,
    write_records,
    write_summary_csv,
    write_summary_json,
)
from .perturb import (
    MaskMode,
    PerturbationKind,
    PerturbationSpec,
    PerturbedImage,
    apply_perturbation,
    build_edit_mask,
    generate_background,
)
from .prompts import ModelFamily, PromptPair, PromptRegistry
from .settings import Settings
from .timing import Clock, MonotonicClock, Phase, PhaseRecorder, PhaseTiming, SimulatedClock

logger = logging.getLogger(__name__)

RECORDS_FILE = "records.jsonl"
SUMMARY_JSON = "summary.json"
SUMMARY_CSV = "summary.csv"
TIMINGS_CSV = "timings.csv"
EFFECTIVE_CONFIG = "effective_config.json"
DETECTIONS_FILE = "detections.jsonl"
SWEEP_CSV = "sweep.csv"
COMPARE_JSON = "mask_mode_comparison.json"
ARTIFACTS_DIR = "artifacts"

FEATHER_CONVENTION = "sigma=radius, half-width=ceil(3*sigma), renormalized, reflect borders"
NO_DETECTIONS = "no detections at or above tau"


class Exclusion(BaseModel):
    """An image (or one spec on an image) that produced no record."""

    model_config = ConfigDict(frozen=True)

    image_id: str
    reason: str
    spec_hash: str | None = None
    condition: str | None = None


@dataclass
class RunResult:
    config: RunConfig
    output_dir: Path
    records: list[OutcomeRecord]
    exclusions: list[Exclusion]
    summaries: list[MetricsSummary]
    timings: list[PhaseTiming]
    metadata: dict[str, Any]
    cache_hits: int = 0
    cache_misses: int = 0

    def artifact_dir(self, image_id: str, spec_hash: str) -> Path:
        return self.output_dir / ARTIFACTS_DIR / image_id / spec_hash

    def summary_for(self, condition: str) -> MetricsSummary:
        for summary in self.summaries:
            if summary.condition == condition:
                return summary
        raise KeyError(condition)

    def image_exclusions(self) -> list[Exclusion]:
        return [e for e in self.exclusions if e.spec_hash is None]


class CachedSegmenter:
    """Segmenter wrapper serving repeated (image, boxes) requests from the artifact cache."""

    def __init__(self, inner: Segmenter, cache: ArtifactCache, identity: str | None = None) -> None:
        self.inner = inner
        self.cache = cache
        self.identity = identity or inner.name
        self.name = inner.name

    def key(self, image: RasterImage, boxes: Sequence[BBox]) -> CacheKey:
        return CacheKey.build(
            "segment",
            image.tobytes(),
            {"backend": self.identity, "size": list(image.size), "boxes": [list(b) for b in boxes]},
        )

    async def segment(self, image: RasterImage, boxes: Sequence[BBox]) -> list[BinaryMask]:
        async def produce() -> list[BinaryMask]:
            return await segment(self.inner, image, boxes)

        return await self.cache.get_or_compute_masks(self.key(image, boxes), produce)

    async def healthcheck(self) -> BackendStatus:
        return await self.inner.healthcheck()


def build_backends(
    config: RunConfig,
    *,
    clock: Clock | None = None,
    settings: Settings | None = None,
    transport: httpx.AsyncBaseTransport | None = None,
) -> BackendSet:
    backends = config.backends
    return build_backend_set(
        backends.detector,
        backends.segmenter,
        backends.inpainter.model_copy(update={"model_family": config.model_family}),
        clock=clock,
        settings=settings,
        transport=transport,
    )


async def ensure_healthy(backends: BackendSet) -> list[BackendStatus]:
    statuses = await backends.healthcheck()
    for status in statuses:
        if not status.reachable:
            raise BackendError(f"backend {status.endpoint} is unreachable: {status.cause}")
    return statuses


def _prompt_entry(spec: PerturbationSpec, prompts: PromptPair) -> dict[str, Any]:
    return {
        "condition": spec.condition,
        "environment": spec.environment,
        "positive": prompts.positive,
        "negative": prompts.negative,
        "positive_source": str(prompts.positive_source),
        "negative_source": str(prompts.negative_source),
    }


class Runner:
    """Processes one manifest under one resolved configuration."""

    def __init__(
        self,
        config: RunConfig,
        backends: BackendSet,
        *,
        clock: Clock,
        registry: PromptRegistry,
    ) -> None:
        self.config = config
        self.backends = backends
        self.registry = registry
        self.recorder = PhaseRecorder(clock)
        self.specs = config.resolved_specs(registry)
        self.output_dir = Path(config.output_dir)
        self._prompts: dict[str, dict[str, Any]] = {}

    def _failed(
        self, image_id: str, spec: PerturbationSpec, pre: Sequence[Detection], error: str
    ) -> OutcomeRecord:
        return OutcomeRecord.failed(
            image_id=image_id,
            spec_hash=spec.spec_hash(),
            condition=spec.condition,
            perturbation=spec.summary(),
            environment=spec.environment,
            pre=pre,
            tau=self.config.tau,
            error=error,
        )

    def _write_artifacts(
        self, image_id: str, spec_hash: str, original: RasterImage, perturbed: PerturbedImage
    ) -> None:
        directory = self.output_dir / ARTIFACTS_DIR / image_id / spec_hash
        directory.mkdir(parents=True, exist_ok=True)
        write_image(original, directory / "original.png")
        if perturbed.spec.kind == PerturbationKind.BACKGROUND:
            write_mask(perturbed.edit_mask.soft, directory / "mask.png")
        else:
            write_mask(perturbed.edit_mask.binary, directory / "mask.png")
        write_image(perturbed.image, directory / "perturbed.png")
        if perturbed.background is not None:
            write_image(perturbed.background, directory / "background.png")

    async def _perturb(
        self, image_id: str, image: RasterImage, pre: list[Detection], spec: PerturbationSpec
    ) -> OutcomeRecord:
        tau = self.config.tau
        labels = {"condition": spec.condition, "mask_mode": str(spec.mask_mode)}
        phase = self.recorder.phase

        with phase(image_id, Phase.MASK, **labels):
            edit = await build_edit_mask(pre, spec, self.backends.segmenter, image, tau=tau)

        if spec.kind == PerturbationKind.BACKGROUND:
            with phase(image_id, Phase.INPAINT, **labels):
                background, prompts = await generate_background(
                    image,
                    spec,
                    self.backends,
                    registry=self.registry,
                    image_id=image_id,
                    canvas_color=self.config.blank_canvas_color,
                )
            with phase(image_id, Phase.COMPOSITE, **labels):
                out = composite(image, edit.soft, background)
            perturbed = PerturbedImage(
                image=out, spec=spec, edit_mask=edit, prompts=prompts, background=background
            )
        else:
            with phase(image_id, Phase.INPAINT, **labels):
                perturbed = await apply_perturbation(
                    image,
                    spec,
                    self.backends,
                    edit,
                    registry=self.registry,
                    image_id=image_id,
                    restore=self.config.restore_unmasked,
                )

        with phase(image_id, Phase.REDETECT, **labels):
            post = await detect(self.backends.detector, perturbed.image)

        entry = _prompt_entry(spec, perturbed.prompts)
        self._prompts[json.dumps(entry, sort_keys=True)] = entry
        spec_hash = spec.spec_hash()
        self._write_artifacts(image_id, spec_hash, image, perturbed)
        return OutcomeRecord.from_detections(
            image_id=image_id,
            spec_hash=spec_hash,
            condition=spec.condition,
            perturbation=spec.summary(),
            environment=spec.environment,
            pre=pre,
            post=post,
            tau=tau,
        )

    async def process(self, entry: ManifestEntry) -> tuple[list[OutcomeRecord], list[Exclusion]]:
        image_id = entry.image_id
        try:
            image = read_image(entry.path)
            with self.recorder.phase(image_id, Phase.DETECT):
                pre = await detect(self.backends.detector, image)
        except PerturbexError as exc:
            logger.warning("image %s failed before perturbation: %s", image_id, exc)
            return [self._failed(image_id, spec, [], str(exc)) for spec in self.specs], []

        if count_at_or_above(pre, self.config.tau) == 0:
            logger.info("excluding %s: %s", image_id, NO_DETECTIONS)
            return [], [Exclusion(image_id=image_id, reason=NO_DETECTIONS)]

        records: list[OutcomeRecord] = []
        exclusions: list[Exclusion] = []
        for spec in self.specs:
            try:
                records.append(await self._perturb(image_id, image, pre, spec))
            except NotApplicableError as exc:
                exclusions.append(
                    Exclusion(
                        image_id=image_id,
                        reason=str(exc),
                        spec_hash=spec.spec_hash(),
                        condition=spec.condition,
                    )
                )
            except (PerturbexError, ValueError) as exc:
                logger.warning("%s on %s failed: %s", spec.label, image_id, exc)
                records.append(self._failed(image_id, spec, pre, str(exc)))
        return records, exclusions

    def metadata(self, manifest_size: int, records: Sequence[OutcomeRecord], exclusions: Sequence[Exclusion]) -> dict[str, Any]:
        config = self.config
        conditions: dict[str, dict[str, Any]] = {}
        for spec in self.specs:
            info = conditions.setdefault(
                spec.condition,
                {
                    "kind": str(spec.kind),
                    "mask_mode": str(spec.mask_mode),
                    "mask_scope": str(spec.mask_scope),
                    "pad_px": spec.effective_pad_px,
                    "feather_radius": spec.effective_feather_radius,
                    "inpaint_params": spec.inpaint_params.model_dump(mode="json"),
                    "spec_hashes": [],
                },
            )
            info["spec_hashes"].append(spec.spec_hash())
        return {
            "schema_version": SCHEMA_VERSION,
            "engine_version": __version__,
            "tau": config.tau,
            "seed": config.seed,
            "model_family": str(config.model_family),
            "std_convention": STD_CONVENTION,
            "feather_convention": FEATHER_CONVENTION,
            "restore_unmasked": config.restore_unmasked,
            "resize_to_model": config.resize_to_model,
            "blank_canvas_color": list(config.blank_canvas_color),
            "manifest_size": manifest_size,
            "records": len(records),
            "failed": sum(1 for r in records if not r.is_scored),
            "excluded_images": sum(1 for e in exclusions if e.spec_hash is None),
            "conditions": conditions,
            "prompts": sorted(
                self._prompts.values(), key=lambda p: json.dumps(p, sort_keys=True)
            ),
        }

    async def run(self) -> RunResult:
        config = self.config
        manifest = load_manifest(config.manifest)
        semaphore = asyncio.Semaphore(config.workers)

        with tqdm(
            total=len(manifest), desc="images", unit="img", disable=not config.progress
        ) as bar:

            async def worker(entry: ManifestEntry) -> tuple[list[OutcomeRecord], list[Exclusion]]:
                async with semaphore:
                    outcome = await self.process(entry)
                bar.update(1)
                return outcome

            outcomes = await asyncio.gather(*(worker(e) for e in manifest.entries))

        records = sorted(
            (r for recs, _ in outcomes for r in recs), key=lambda r: (r.image_id, r.spec_hash)
        )
        exclusions = sorted(
            (e for _, excl in outcomes for e in excl),
            key=lambda e: (e.image_id, e.spec_hash or ""),
        )
        env_order = [env.name for env in self.registry.environments()]
        conditions = list(dict.fromkeys(spec.condition for spec in self.specs))
        summaries = [
            summarize(
                [r for r in records if r.condition == condition],
                config.tau,
                condition=condition,
                environment_order=env_order,
            )
            for condition in conditions
        ]
        timings = sorted(self.recorder.timings, key=lambda t: t.image_id)
        logger.info(
            "run finished: %d records, %d exclusions over %d images",
            len(records),
            len(exclusions),
            len(manifest),
        )
        return RunResult(
            config=config,
            output_dir=self.output_dir,
            records=records,
            exclusions=exclusions,
            summaries=summaries,
            timings=timings,
            metadata=self.metadata(len(manifest), records, exclusions),
        )


def write_timings(timings: Sequence[PhaseTiming], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["image_id", "condition", "mask_mode", "phase", "wall_seconds"])
        for t in timings:
            writer.writerow([t.image_id, t.condition or "", t.mask_mode or "", t.phase, f"{t.wall_seconds:.6f}"])


def read_timings(path: Path) -> list[PhaseTiming]:
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as f:
        return [
            PhaseTiming(
                image_id=row["image_id"],
                condition=row["condition"] or None,
                mask_mode=row["mask_mode"] or None,
                phase=Phase(row["phase"]),
                wall_seconds=float(row["wall_seconds"]),
            )
            for row in csv.DictReader(f)
        ]


def write_run(result: RunResult) -> None:
    out = result.output_dir
    out.mkdir(parents=True, exist_ok=True)
    write_records(result.records, out / RECORDS_FILE)
    write_summary_json(
        result.summaries,
        out / SUMMARY_JSON,
        result.metadata,
        extra={"exclusions": [e.model_dump(mode="json") for e in result.exclusions]},
    )
    write_summary_csv(result.summaries, out / SUMMARY_CSV)
    write_timings(result.timings, out / TIMINGS_CSV)
    (out / EFFECTIVE_CONFIG).write_text(
        json.dumps(result.config.effective(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_run(run_dir: str | Path) -> RunResult:
    """Rebuild a RunResult from a run directory."""
    run_dir = Path(run_dir)
    summary_path = run_dir / SUMMARY_JSON
    if not summary_path.exists():
        raise ConfigError(f"{run_dir} is not a run directory (no {SUMMARY_JSON})")
    document = json.loads(summary_path.read_text(encoding="utf-8"))
    config = RunConfig.model_validate(
        json.loads((run_dir / EFFECTIVE_CONFIG).read_text(encoding="utf-8"))
    )
    return RunResult(
        config=config,
        output_dir=run_dir,
        records=read_records(run_dir / RECORDS_FILE),
        exclusions=[Exclusion.model_validate(e) for e in document.get("exclusions", [])],
        summaries=[MetricsSummary.model_validate(s) for s in document["conditions"]],
        timings=read_timings(run_dir / TIMINGS_CSV),
        metadata=document.get("metadata", {}),
    )


def _make_clock(config: RunConfig, clock: Clock | None) -> Clock:
    if clock is not None:
        return clock
    return SimulatedClock() if config.simulated_clock else MonotonicClock()


async def run(
    config: RunConfig,
    *,
    backends: BackendSet | None = None,
    clock: Clock | None = None,
    settings: Settings | None = None,
    transport: httpx.AsyncBaseTransport | None = None,
) -> RunResult:
    """Run the full pipeline and write the run directory."""
    clock = _make_clock(config, clock)
    registry = config.prompt_registry()
    segmenter_identity = None
    if backends is None:
        backends = build_backends(config, clock=clock, settings=settings, transport=transport)
        segmenter_identity = config.backends.segmenter.identity()
    await ensure_healthy(backends)

    cache = ArtifactCache(config.cache_dir)
    cached = BackendSet(
        detector=backends.detector,
        segmenter=CachedSegmenter(backends.segmenter, cache, segmenter_identity),
        inpainter=backends.inpainter,
        model_family=config.model_family,
    )
    result = await Runner(config, cached, clock=clock, registry=registry).run()
    result.cache_hits, result.cache_misses = cache.hits, cache.misses
    logger.info("mask cache: %d hits, %d misses", cache.hits, cache.misses)
    write_run(result)
    return result


async def detect_only(
    config: RunConfig,
    *,
    backends: BackendSet | None = None,
    settings: Settings | None = None,
    transport: httpx.AsyncBaseTransport | None = None,
) -> dict[str, Any]:
    """Detection pass over the manifest; writes detections.jsonl."""
    manifest = load_manifest(config.manifest)
    if backends is None:
        backends = build_backends(
            config, clock=_make_clock(config, None), settings=settings, transport=transport
        )
    await ensure_healthy(backends)
    semaphore = asyncio.Semaphore(config.workers)

    async def one(entry: ManifestEntry) -> dict[str, Any]:
        async with semaphore:
            try:
                detections = await detect(backends.detector, read_image(entry.path))
            except PerturbexError as exc:
                logger.warning("detection failed for %s: %s", entry.image_id, exc)
                return {"image_id": entry.image_id, "status": "failed", "error": str(exc)}
        return {
            "image_id": entry.image_id,
            "status": "ok",
            "detections": [d.to_wire() for d in detections],
            "count_tau": count_at_or_above(detections, config.tau),
            "top_tau": thresholded_top_confidence(detections, config.tau),
        }

    rows = await asyncio.gather(*(one(e) for e in manifest.entries))
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / DETECTIONS_FILE
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    ok = [r for r in rows if r["status"] == "ok"]
    return {
        "images": len(rows),
        "eligible": sum(1 for r in ok if r["count_tau"] > 0),
        "excluded": sum(1 for r in ok if r["count_tau"] == 0),
        "failed": len(rows) - len(ok),
        "tau": config.tau,
        "path": str(path),
    }


# -- parameter sweeps ------------------------------------------------------

REFERENCE_GRIDS: dict[ModelFamily, dict[str, list[Any]]] = {
    ModelFamily.STABLE_DIFFUSION: {
        "guidance_scale": [10, 15, 20],
        "num_inference_steps": [50, 100, 250, 500],
        "seed": [42, 123],
    },
    ModelFamily.FLUX: {
        "guidance_scale": [10, 15, 20],
        "strength": [0.5, 0.75, 1.0],
        "num_inference_steps": [30, 40, 50],
        "seed": [42, 123],
    },
    ModelFamily.SDXL: {
        "guidance_scale": [25, 35, 50],
        "num_inference_steps": [20, 40, 100, 250, 500],
        "prompt_strength": [0.5, 0.75, 1.0],
        "seed": [42, 123],
    },
    ModelFamily.LAMA: {"seed": [42, 123]},
}

SWEEP_PARAMETERS: dict[ModelFamily, frozenset[str]] = {
    ModelFamily.STABLE_DIFFUSION: frozenset({"guidance_scale", "num_inference_steps", "seed", "scheduler"}),
    ModelFamily.FLUX: frozenset({"guidance_scale", "strength", "num_inference_steps", "seed"}),
    ModelFamily.SDXL: frozenset(
        {"guidance_scale", "num_inference_steps", "prompt_strength", "seed", "scheduler"}
    ),
    ModelFamily.LAMA: frozenset({"seed"}),
}

# Grid names that map onto a differently named request parameter.
PARAMETER_ALIASES = {"prompt_strength": "strength"}


def validate_grid(grid: Mapping[str, Sequence[Any]], family: ModelFamily) -> None:
    allowed = SWEEP_PARAMETERS[ModelFamily(family)]
    for name, values in grid.items():
        if name not in allowed:
            raise SweepError(f"{name!r} is not a sweep parameter for {family}; allowed: {sorted(allowed)}")
        if not values:
            raise SweepError(f"sweep grid for {name!r} has no values")


def expand_grid(grid: Mapping[str, Sequence[Any]] | None) -> list[dict[str, Any]]:
    """Cartesian product in key order; an empty grid is the single empty combination."""
    if not grid:
        return [{}]
    names = list(grid)
    return [dict(zip(names, values)) for values in itertools.product(*(grid[n] for n in names))]


def config_for_combination(config: RunConfig, combination: Mapping[str, Any], output_dir: Path) -> RunConfig:
    inpaint = dict(config.inpaint)
    seed = config.seed
    for name, value in combination.items():
        if name == "seed":
            seed = int(value)
        else:
            inpaint[PARAMETER_ALIASES.get(name, name)] = value
    return config.with_overrides(seed=seed, inpaint=inpaint, output_dir=str(output_dir), sweep=None)


async def sweep(
    config: RunConfig,
    *,
    backends: BackendSet | None = None,
    clock: Clock | None = None,
    settings: Settings | None = None,
    transport: httpx.AsyncBaseTransport | None = None,
) -> list[RunResult]:
    """One run per grid combination plus ``sweep.csv`` with a blank manual_quality column."""
    grid = config.sweep or {}
    validate_grid(grid, config.model_family)
    combinations = expand_grid(grid)
    root = Path(config.output_dir)
    logger.info("sweeping %d combinations over %s", len(combinations), sorted(grid))

    results: list[RunResult] = []
    for index, combination in enumerate(combinations):
        out = root / f"sweep-{index:03d}" if grid else root
        combo_config = config_for_combination(config, combination, out)
        results.append(
            await run(combo_config, backends=backends, clock=clock, settings=settings, transport=transport)
        )

    root.mkdir(parents=True, exist_ok=True)
    names = list(grid)
    with open(root / SWEEP_CSV, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(
            ["index", *names, "condition", "N", "flips", "flip_rate", "cd_mean", "cd_std", "run_dir", "manual_quality"]
        )
        for index, (combination, result) in enumerate(zip(combinations, results)):
            rel = result.output_dir.relative_to(root).as_posix() if grid else "."
            for s in result.summaries:
                writer.writerow(
                    [
                        index,
                        *(combination[n] for n in names),
                        s.condition,
                        s.N,
                        s.flips,
                        "" if s.flip_rate is None else s.flip_rate,
                        "" if s.cd_mean is None else s.cd_mean,
                        "" if s.cd_std is None else s.cd_std,
                        rel,
                        "",
                    ]
                )
    return results


# -- mask-mode timing comparison -------------------------------------------


class ModeTiming(BaseModel):
    model_config = ConfigDict(frozen=True)

    mask_mode: MaskMode
    images: int
    phase_means: dict[str, float]
    mean_total: float


class MaskModeComparison(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: PerturbationKind
    cache: str
    segmentation: ModeTiming
    bbox: ModeTiming
    speedup: float | None


class MaskModeReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    removal: MaskModeComparison
    replacement: MaskModeComparison | None = None


def mode_timing(result: RunResult, mask_mode: MaskMode) -> ModeTiming:
    """Per-phase and per-image-total means over images that produced a record."""
    scored = {r.image_id for r in result.records}
    per_image: dict[str, dict[str, float]] = {}
    for t in result.timings:
        if t.image_id in scored:
            phases = per_image.setdefault(t.image_id, {})
            phases[t.phase] = phases.get(t.phase, 0.0) + t.wall_seconds
    rows = list(per_image.values())
    phase_means = {
        str(p): float(np.mean([phases.get(p, 0.0) for phases in rows])) if rows else 0.0
        for p in Phase
    }
    totals = [sum(phases.values()) for phases in rows]
    return ModeTiming(
        mask_mode=mask_mode,
        images=len(per_image),
        phase_means=phase_means,
        mean_total=float(np.mean(totals)) if totals else 0.0,
    )


def speedup_ratio(segmentation: ModeTiming, bbox: ModeTiming) -> float | None:
    if bbox.mean_total == 0.0:
        return 1.0 if segmentation.mean_total == 0.0 else None
    return segmentation.mean_total / bbox.mean_total


async def compare_mask_modes(
    config: RunConfig,
    *,
    include_replacement: bool = True,
    backends: BackendSet | None = None,
    clock: Clock | None = None,
    settings: Settings | None = None,
    transport: httpx.AsyncBaseTransport | None = None,
) -> MaskModeReport:
    """Time removal under both mask modes on a cold mask cache, then replacement on the warm one."""
    target = next(
        (s.target_class for s in config.perturbations if s.kind == PerturbationKind.REPLACEMENT),
        "boat",
    )
    root = Path(config.output_dir)
    kinds: list[tuple[PerturbationKind, dict[str, Any]]] = [(PerturbationKind.REMOVAL, {})]
    if include_replacement:
        kinds.append((PerturbationKind.REPLACEMENT, {"target_class": target}))

    comparisons: dict[str, MaskModeComparison] = {}
    with tempfile.TemporaryDirectory(prefix="perturbex-masks-") as cache_dir:
        for index, (kind, extra) in enumerate(kinds):
            timings: dict[MaskMode, ModeTiming] = {}
            for mode in (MaskMode.SEGMENTATION, MaskMode.BBOX):
                mode_config = config.with_overrides(
                    perturbations=[{"kind": str(kind), "mask_mode": str(mode), **extra}],
                    cache_dir=cache_dir,
                    output_dir=str(root / "compare" / f"{kind}-{mode}"),
                    sweep=None,
                )
                result = await run(
                    mode_config, backends=backends, clock=clock, settings=settings, transport=transport
                )
                timings[mode] = mode_timing(result, mode)
            comparisons[str(kind)] = MaskModeComparison(
                kind=kind,
                cache="cold" if index == 0 else "warm",
                segmentation=timings[MaskMode.SEGMENTATION],
                bbox=timings[MaskMode.BBOX],
                speedup=speedup_ratio(timings[MaskMode.SEGMENTATION], timings[MaskMode.BBOX]),
            )

    report = MaskModeReport(
        removal=comparisons[str(PerturbationKind.REMOVAL)],
        replacement=comparisons.get(str(PerturbationKind.REPLACEMENT)),
    )
    root.mkdir(parents=True, exist_ok=True)
    (root / COMPARE_JSON).write_text(
        json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return report


def run_overview(result: RunResult) -> dict[str, Any]:
    """Compact JSON view of a run for the CLI and MCP tools."""
    return {
        "output_dir": str(result.output_dir),
        "manifest_size": result.metadata.get("manifest_size"),
        "records": len(result.records),
        "exclusions": len(result.exclusions),
        "failed": sum(1 for r in result.records if not r.is_scored),
        "summaries": [s.model_dump(mode="json") for s in result.summaries],
    }
