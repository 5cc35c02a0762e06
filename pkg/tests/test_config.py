"""Tests for run-config loading and resolution."""

from __future__ import annotations

import json

import pytest

from perturbex.config import RunConfig, load_run_config
from perturbex.errors import ConfigError
from perturbex.perturb import MaskMode, PerturbationKind
from perturbex.prompts import ModelFamily, list_environments

TOML_CONFIG = """
manifest = "data/manifest.json"
tau = 0.5
seed = 7
workers = 3
cache_dir = "cache"
output_dir = "out"

[backends.detector]
endpoint = "mock:blob-detector"

[backends.segmenter]
endpoint = "mock:blob-segmenter"

[backends.inpainter]
endpoint = "mock:fill-inpainter"
model_family = "sdxl"

[[perturbations]]
kind = "removal"
mask_mode = "bbox"

[[perturbations]]
kind = "replacement"
target_class = "boat"
"""


def test_load_toml_resolves_relative_paths(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(TOML_CONFIG, encoding="utf-8")
    config = load_run_config(path)
    assert config.manifest == tmp_path / "data" / "manifest.json"
    assert config.cache_dir == tmp_path / "cache"
    assert config.output_dir == tmp_path / "out"
    assert (config.tau, config.seed, config.workers) == (0.5, 7, 3)
    assert config.backends.inpainter.model_family == ModelFamily.SDXL
    assert [s.kind for s in config.perturbations] == [
        PerturbationKind.REMOVAL,
        PerturbationKind.REPLACEMENT,
    ]


def test_load_json(config_file):
    config = load_run_config(config_file())
    assert config.workers == 2
    assert config.perturbations[0].mask_mode == MaskMode.SEGMENTATION


def test_missing_and_unsupported_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_run_config(tmp_path / "absent.toml")
    yaml = tmp_path / "run.yaml"
    yaml.write_text("tau: 0.4", encoding="utf-8")
    with pytest.raises(ConfigError, match="unsupported"):
        load_run_config(yaml)


def test_unparseable_file(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError, match="could not parse"):
        load_run_config(path)


def test_tau_out_of_range_is_config_error(config_file):
    with pytest.raises(ConfigError, match="tau"):
        load_run_config(config_file(tau=1.5))
    config = load_run_config(config_file())
    with pytest.raises(ConfigError, match="tau"):
        config.with_overrides(tau=1.5)


def test_unknown_key_is_rejected(config_file):
    with pytest.raises(ConfigError):
        load_run_config(config_file(tua=0.4))


def test_empty_sweep_axis_is_rejected(config_file):
    with pytest.raises(ConfigError, match="no values"):
        load_run_config(config_file(sweep={"guidance_scale": []}))


def test_with_overrides_beats_file_values(make_config):
    config = make_config(tau=0.3, seed=1)
    overridden = config.with_overrides(mask_mode="bbox", tau=0.6, seed=9, workers=8)
    assert overridden.tau == 0.6
    assert overridden.seed == 9
    assert overridden.workers == 8
    assert all(s.mask_mode == MaskMode.BBOX for s in overridden.perturbations)
    assert config.tau == 0.3


def test_all_environments_expand_in_registry_order(make_config):
    config = make_config(perturbations=[{"kind": "background", "environment": "all"}])
    specs = config.resolved_specs()
    assert [s.environment for s in specs] == [e.name for e in list_environments()]
    assert len({s.spec_hash() for s in specs}) == 15
    assert {s.condition for s in specs} == {"background-segmentation"}


def test_unknown_environment(make_config):
    config = make_config(perturbations=[{"kind": "background", "environment": "moon"}])
    with pytest.raises(ConfigError, match="unknown environment"):
        config.resolved_specs()


def test_duplicate_condition_labels(make_config):
    config = make_config(perturbations=[{"kind": "removal"}, {"kind": "removal"}])
    with pytest.raises(ConfigError, match="share the condition"):
        config.resolved_specs()
    named = make_config(perturbations=[{"kind": "removal"}, {"kind": "removal", "name": "again"}])
    assert [s.label for s in named.resolved_specs()] == ["removal-segmentation", "again"]


def test_inpaint_parameter_precedence(make_config):
    config = make_config(
        seed=5,
        resize_to_model=True,
        model_family="sdxl",
        inpaint={"guidance_scale": 7.5, "num_inference_steps": 30},
        perturbations=[{"kind": "removal", "inpaint_params": {"num_inference_steps": 10}}],
    )
    (spec,) = config.resolved_specs()
    params = spec.inpaint_params
    assert params.guidance_scale == 7.5
    assert params.num_inference_steps == 10
    assert params.seed == 5
    assert params.target_resolution == (1024, 1024)
    assert spec.model_family == ModelFamily.SDXL


def test_resize_to_model_off_drops_target_resolution(make_config):
    (spec,) = make_config().resolved_specs()
    assert spec.inpaint_params.target_resolution is None


def test_unknown_inpaint_parameter(make_config):
    with pytest.raises(ValueError, match="unknown inpaint parameters"):
        make_config(inpaint={"cfg": 3})


def test_prompt_overrides_are_applied(make_config, tmp_path):
    overrides = tmp_path / "prompts.json"
    overrides.write_text(json.dumps({"removal_positive": "empty beach"}), encoding="utf-8")
    registry = make_config(prompt_overrides=str(overrides)).prompt_registry()
    pair = registry.get_prompt(ModelFamily.STABLE_DIFFUSION, "removal_positive")
    assert pair.positive == "empty beach"


def test_effective_config_is_json_serializable(make_config):
    config = make_config()
    document = json.loads(json.dumps(config.effective()))
    assert RunConfig.model_validate(document) == config
