"""Shared fixtures: synthetic blob datasets and run configs on mock backends."""

from __future__ import annotations

import json
from collections.abc import Callable
from pathlib import Path
from typing import Any

import pytest

from perturbex.backends import BackendDescriptor, BackendKind, BackendSet, build_backend_set
from perturbex.config import RunConfig, load_run_config
from perturbex.mocks import write_blob_dataset
from perturbex.prompts import ModelFamily
from perturbex.timing import Clock


def mock_backends(
    detector: str = "blob-detector",
    segmenter: str = "blob-segmenter",
    inpainter: str = "fill-inpainter",
    *,
    clock: Clock | None = None,
    inpainter_options: dict[str, str] | None = None,
    model_family: ModelFamily = ModelFamily.STABLE_DIFFUSION,
) -> BackendSet:
    return build_backend_set(
        BackendDescriptor(kind=BackendKind.DETECTOR, endpoint=f"mock:{detector}"),
        BackendDescriptor(kind=BackendKind.SEGMENTER, endpoint=f"mock:{segmenter}"),
        BackendDescriptor(
            kind=BackendKind.INPAINTER,
            endpoint=f"mock:{inpainter}",
            model_family=model_family,
            options=inpainter_options or {},
        ),
        clock=clock,
    )


def config_dict(manifest: Path, tmp_path: Path, **overrides: Any) -> dict[str, Any]:
    data: dict[str, Any] = {
        "manifest": str(manifest),
        "backends": {
            "detector": {"endpoint": "mock:blob-detector"},
            "segmenter": {"endpoint": "mock:blob-segmenter"},
            "inpainter": {"endpoint": "mock:fill-inpainter"},
        },
        "perturbations": [{"kind": "removal"}],
        "workers": 2,
        "cache_dir": str(tmp_path / "cache"),
        "output_dir": str(tmp_path / "run"),
        "resize_to_model": False,
    }
    data.update(overrides)
    return data


@pytest.fixture
def blob_dataset(tmp_path: Path) -> Path:
    """Ten 96x96 images with one or two red blobs each."""
    return write_blob_dataset(tmp_path / "data", 10, seed=42)


@pytest.fixture
def make_config(tmp_path: Path, blob_dataset: Path) -> Callable[..., RunConfig]:
    def build(**overrides: Any) -> RunConfig:
        manifest = overrides.pop("manifest", blob_dataset)
        return RunConfig.model_validate(config_dict(manifest, tmp_path, **overrides))

    return build


@pytest.fixture
def config_file(tmp_path: Path, blob_dataset: Path) -> Callable[..., Path]:
    """Write a JSON run config and return its path."""

    def write(name: str = "config.json", **overrides: Any) -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(config_dict(blob_dataset, tmp_path, **overrides)), encoding="utf-8")
        load_run_config(path)
        return path

    return write
