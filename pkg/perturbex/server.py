"""MCP server exposing the perturbation engine using FastMCP."""

from __future__ import annotations

import functools
import logging
import sys
from collections.abc import Awaitable, Callable
from typing import Any

from fastmcp import FastMCP

from . import runner
from .backends import BackendKind, healthcheck
from .config import RunConfig, load_run_config
from .errors import PerturbexError
from .metrics import summarize
from .prompts import ModelFamily, PromptPurpose, PromptRegistry
from .report import import_annotations, render_gallery
from .settings import get_settings

logger = logging.getLogger(__name__)

JsonDict = dict[str, Any]

mcp = FastMCP("perturbex")


def _guarded(fn: Callable[..., Awaitable[JsonDict]]) -> Callable[..., Awaitable[JsonDict]]:
    """Report engine errors as an ``{"error": ...}`` payload instead of raising."""

    @functools.wraps(fn)
    async def wrapper(*args: Any, **kwargs: Any) -> JsonDict:
        try:
            return await fn(*args, **kwargs)
        except PerturbexError as exc:
            logger.error("%s failed: %s", fn.__name__, exc)
            return {"error": str(exc), "category": exc.category, "exit_code": exc.exit_code}

    return wrapper


def _load(config_path: str, **overrides: Any) -> RunConfig:
    config = load_run_config(config_path)
    mask_mode = overrides.pop("mask_mode", None)
    tau = overrides.pop("tau", None)
    seed = overrides.pop("seed", None)
    fields = {k: v for k, v in overrides.items() if v is not None}
    if mask_mode is None and tau is None and seed is None and not fields:
        return config
    return config.with_overrides(mask_mode=mask_mode, tau=tau, seed=seed, **fields)


@_guarded
async def list_environments() -> JsonDict:
    """List the background environments available for background replacement.

    Returns:
        Environment names with the descriptions sent as positive prompts
    """
    environments = PromptRegistry.default().environments()
    return {
        "count": len(environments),
        "environments": [env.model_dump(mode="json") for env in environments],
    }


@_guarded
async def get_prompt_text(
    model_family: str,
    purpose: str,
    class_label: str | None = None,
    environment: str | None = None,
    target_class: str | None = None,
) -> JsonDict:
    """Look up the prompt pair used for one inpainting purpose.

    Args:
        model_family: stable-diffusion, flux, sdxl or lama
        purpose: removal_positive, removal_negative, per_class_negative,
            background_env, background_negative or replacement_positive
        class_label: Detected class (per_class_negative, replacement_positive)
        environment: Environment name (background_env)
        target_class: Class to paint in (replacement_positive)

    Returns:
        Positive and negative prompt texts with their sources
    """
    try:
        family = ModelFamily(model_family)
        kind = PromptPurpose(purpose)
    except ValueError as exc:
        return {"error": str(exc), "category": "config", "exit_code": 2}
    registry = PromptRegistry.default()
    if kind == PromptPurpose.REPLACEMENT_POSITIVE:
        if not target_class or not class_label:
            return {
                "error": "replacement_positive needs target_class and class_label",
                "category": "config",
                "exit_code": 2,
            }
        pair = registry.replacement_prompt(family, target_class, class_label)
    else:
        pair = registry.get_prompt(family, kind, class_label=class_label, environment=environment)
    return pair.model_dump(mode="json")


@_guarded
async def check_backends(config_path: str) -> JsonDict:
    """Probe the detector, segmenter and inpainter a run config names.

    Args:
        config_path: Path to a TOML or JSON run config
    """
    config = load_run_config(config_path)
    statuses = {}
    for kind in BackendKind:
        status = await healthcheck(getattr(config.backends, str(kind)))
        statuses[str(kind)] = status.model_dump(mode="json")
    return {"healthy": all(s["reachable"] for s in statuses.values()), "backends": statuses}


@_guarded
async def run_experiment(
    config_path: str,
    mask_mode: str | None = None,
    tau: float | None = None,
    seed: int | None = None,
    output_dir: str | None = None,
) -> JsonDict:
    """Run detect, perturb and re-detect over a dataset and summarize the outcomes.

    Args:
        config_path: Path to a TOML or JSON run config
        mask_mode: Override the mask mode of every perturbation (segmentation or bbox)
        tau: Override the confidence threshold
        seed: Override the inpainting seed
        output_dir: Override the run directory

    Returns:
        Record counts and per-condition metrics
    """
    config = _load(config_path, mask_mode=mask_mode, tau=tau, seed=seed, output_dir=output_dir)
    result = await runner.run(config, settings=get_settings())
    return runner.run_overview(result)


@_guarded
async def detect_dataset(
    config_path: str, tau: float | None = None, output_dir: str | None = None
) -> JsonDict:
    """Run the detector alone and report which images would be eligible.

    Args:
        config_path: Path to a TOML or JSON run config
        tau: Override the confidence threshold
        output_dir: Where detections.jsonl is written
    """
    config = _load(config_path, tau=tau, output_dir=output_dir)
    return await runner.detect_only(config, settings=get_settings())


@_guarded
async def sweep_experiment(config_path: str, output_dir: str | None = None) -> JsonDict:
    """Run one experiment per combination of the config's sweep grid."""
    config = _load(config_path, output_dir=output_dir)
    results = await runner.sweep(config, settings=get_settings())
    return {
        "combinations": len(results),
        "sweep_csv": str(config.output_dir / runner.SWEEP_CSV),
        "runs": [runner.run_overview(r) for r in results],
    }


@_guarded
async def compare_mask_modes(
    config_path: str, include_replacement: bool = True, output_dir: str | None = None
) -> JsonDict:
    """Time segmentation masks against bounding-box masks on the same images.

    Args:
        config_path: Path to a TOML or JSON run config
        include_replacement: Also time replacement on the warm mask cache
        output_dir: Where the comparison runs are written
    """
    config = _load(config_path, output_dir=output_dir)
    report = await runner.compare_mask_modes(
        config, include_replacement=include_replacement, settings=get_settings()
    )
    return report.model_dump(mode="json")


@_guarded
async def summarize_run(run_dir: str, tau: float | None = None) -> JsonDict:
    """Summarize an existing run directory, optionally re-thresholded at another tau.

    Args:
        run_dir: A directory written by run_experiment
        tau: Recompute the metrics at this threshold
    """
    result = runner.load_run(run_dir)
    if tau is not None:
        order = [env.name for env in PromptRegistry.default().environments()]
        result.summaries = [
            summarize(
                [r for r in result.records if r.condition == s.condition],
                tau,
                condition=s.condition,
                environment_order=order,
            )
            for s in result.summaries
        ]
    return runner.run_overview(result)


@_guarded
async def render_report(
    run_dir: str, annotations: str | None = None, output: str | None = None
) -> JsonDict:
    """Render the HTML gallery of a run, after importing plausibility annotations.

    Args:
        run_dir: A directory written by run_experiment
        annotations: CSV with image_id, spec_hash and plausibility columns
        output: Gallery directory (default: <run_dir>/gallery)
    """
    result = runner.load_run(run_dir)
    if annotations:
        result = import_annotations(annotations, result)
        runner.write_run(result)
    gallery = render_gallery(result, output)
    return {
        "index": str(gallery.index),
        "pages": [str(p) for p in gallery.pages],
        "warnings": gallery.warnings,
    }


for _tool in (
    list_environments,
    get_prompt_text,
    check_backends,
    run_experiment,
    detect_dataset,
    sweep_experiment,
    compare_mask_modes,
    summarize_run,
    render_report,
):
    mcp.tool()(_tool)


def configure_logging(level: str | None = None) -> None:
    """Log to stderr; stdout carries protocol or JSON output."""
    logging.basicConfig(
        level=(level or get_settings().log_level).upper(),
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(transport: str = "stdio", host: str = "127.0.0.1", port: int = 8000) -> None:
    """Run the MCP server over stdio, or over HTTP when asked."""
    configure_logging()
    if transport == "stdio":
        mcp.run()
    else:
        mcp.run(transport=transport, host=host, port=port)


if __name__ == "__main__":
    main()
