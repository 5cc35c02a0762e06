"""Command-line interface for the perturbation engine."""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
from collections.abc import Awaitable, Callable
from typing import Any

from . import SCHEMA_VERSION, __version__, server
from .errors import EXIT_CONFIG
from .mocks import MOCK_REGISTRY
from .mockserve import mock_backend_set, serve
from .perturb import DEFAULT_TAU, MaskMode
from .prompts import ModelFamily, PromptPurpose

logger = logging.getLogger(__name__)

JsonDict = dict[str, Any]
Handler = Callable[[argparse.Namespace], Awaitable[JsonDict]]

EXIT_INTERNAL = 1


class JsonArgumentParser(argparse.ArgumentParser):
    """Argument parser that raises exceptions instead of exiting on errors."""

    def error(self, message: str) -> None:
        raise ValueError(message)


def _tau(value: str) -> float:
    try:
        tau = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"tau must be a number, got {value!r}") from None
    if not 0.0 <= tau <= 1.0:
        raise argparse.ArgumentTypeError(f"tau must be in [0, 1], got {tau}")
    return tau


def _key_value(value: str) -> tuple[str, str]:
    key, sep, option = value.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {value!r}")
    return key.strip(), option.strip()


def _build_parser() -> argparse.ArgumentParser:
    parser = JsonArgumentParser(
        prog="perturbex",
        description="Inpainting perturbations for explaining object detectors",
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"perturbex {__version__} (schema {SCHEMA_VERSION})",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    detect = subparsers.add_parser("detect", help="Detection pass only")
    detect.add_argument("--config", required=True, help="Run config (.toml or .json)")
    detect.add_argument("--tau", type=_tau, help=f"Confidence threshold (default {DEFAULT_TAU})")
    detect.add_argument("--output-dir", help="Where detections.jsonl is written")
    detect.set_defaults(handler=_detect)

    run = subparsers.add_parser("run", help="Detect, perturb and re-detect")
    run.add_argument("--config", required=True, help="Run config (.toml or .json)")
    run.add_argument("--mask-mode", choices=[str(m) for m in MaskMode], help="Override mask mode")
    run.add_argument("--tau", type=_tau, help=f"Confidence threshold (default {DEFAULT_TAU})")
    run.add_argument("--seed", type=int, help="Inpainting seed")
    run.add_argument("--output-dir", help="Run directory")
    run.set_defaults(handler=_run)

    sweep = subparsers.add_parser("sweep", help="Expand the config's parameter grid")
    sweep.add_argument("--config", required=True, help="Run config (.toml or .json)")
    sweep.add_argument("--output-dir", help="Sweep root directory")
    sweep.set_defaults(handler=_sweep)

    compare = subparsers.add_parser(
        "compare-mask-modes", help="Time segmentation against bounding-box masks"
    )
    compare.add_argument("--config", required=True, help="Run config (.toml or .json)")
    compare.add_argument(
        "--no-replacement", action="store_true", help="Skip the warm-cache replacement rerun"
    )
    compare.add_argument("--output-dir", help="Comparison root directory")
    compare.set_defaults(handler=_compare)

    report = subparsers.add_parser("report", help="Render the HTML gallery of a run")
    report.add_argument("--run", required=True, help="Run directory")
    report.add_argument("--annotations", help="CSV of image_id,spec_hash,plausibility")
    report.add_argument("--output", help="Gallery directory (default <run>/gallery)")
    report.set_defaults(handler=_report)

    summary = subparsers.add_parser("summarize", help="Summarize an existing run")
    summary.add_argument("--run", required=True, help="Run directory")
    summary.add_argument("--tau", type=_tau, help="Re-threshold the stored records")
    summary.set_defaults(handler=_summarize)

    mock_serve = subparsers.add_parser("mock-serve", help="Serve mock backends over HTTP")
    mock_serve.add_argument("--host", default="127.0.0.1", help="Bind address")
    mock_serve.add_argument("--port", type=int, default=8765, help="Port")
    mock_serve.add_argument("--detector", default="blob-detector", choices=sorted(MOCK_REGISTRY))
    mock_serve.add_argument("--segmenter", default="blob-segmenter", choices=sorted(MOCK_REGISTRY))
    mock_serve.add_argument("--inpainter", default="fill-inpainter", choices=sorted(MOCK_REGISTRY))
    for role in ("detector", "segmenter", "inpainter"):
        mock_serve.add_argument(
            f"--{role}-option",
            dest=f"{role}_options",
            type=_key_value,
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help=f"Option for the {role} mock (repeatable)",
        )
    mock_serve.set_defaults(handler=_mock_serve)

    environments = subparsers.add_parser("environments", help="List background environments")
    environments.set_defaults(handler=_environments)

    prompt = subparsers.add_parser("prompt", help="Show the prompt pair for one purpose")
    prompt.add_argument("--model-family", required=True, choices=[str(f) for f in ModelFamily])
    prompt.add_argument("--purpose", required=True, choices=[str(p) for p in PromptPurpose])
    prompt.add_argument("--class-label", help="Detected class")
    prompt.add_argument("--environment", help="Environment name")
    prompt.add_argument("--target-class", help="Replacement class")
    prompt.set_defaults(handler=_prompt)

    check = subparsers.add_parser("check-backends", help="Probe the configured backends")
    check.add_argument("--config", required=True, help="Run config (.toml or .json)")
    check.set_defaults(handler=_check_backends)

    return parser


def _print_json(payload: JsonDict) -> None:
    try:
        print(json.dumps(payload, ensure_ascii=False, indent=2))
    except UnicodeEncodeError:
        print(json.dumps(payload, ensure_ascii=True, indent=2))


def _normalize_exit_code(code: object) -> int:
    if code is None:
        return 0
    if isinstance(code, int):
        return code
    return EXIT_CONFIG


def main(argv: list[str] | None = None) -> int:
    """Run CLI with JSON output; the exit code follows the error category."""
    parser = _build_parser()

    try:
        args = parser.parse_args(argv)
        handler: Handler = args.handler
    except ValueError as exc:
        _print_json({"error": str(exc), "category": "config"})
        return EXIT_CONFIG
    except SystemExit as exc:
        return _normalize_exit_code(exc.code)

    server.configure_logging()
    try:
        result = asyncio.run(handler(args))
    except Exception as exc:
        logger.exception("unexpected failure")
        _print_json({"error": str(exc), "category": "internal"})
        return EXIT_INTERNAL

    if "error" in result:
        exit_code = int(result.pop("exit_code", EXIT_INTERNAL))
        _print_json(result)
        return exit_code
    _print_json(result)
    return 0


async def _detect(args: argparse.Namespace) -> JsonDict:
    return await server.detect_dataset(
        config_path=args.config, tau=args.tau, output_dir=args.output_dir
    )


async def _run(args: argparse.Namespace) -> JsonDict:
    return await server.run_experiment(
        config_path=args.config,
        mask_mode=args.mask_mode,
        tau=args.tau,
        seed=args.seed,
        output_dir=args.output_dir,
    )


async def _sweep(args: argparse.Namespace) -> JsonDict:
    return await server.sweep_experiment(config_path=args.config, output_dir=args.output_dir)


async def _compare(args: argparse.Namespace) -> JsonDict:
    return await server.compare_mask_modes(
        config_path=args.config,
        include_replacement=not args.no_replacement,
        output_dir=args.output_dir,
    )


async def _report(args: argparse.Namespace) -> JsonDict:
    return await server.render_report(
        run_dir=args.run, annotations=args.annotations, output=args.output
    )


async def _summarize(args: argparse.Namespace) -> JsonDict:
    return await server.summarize_run(run_dir=args.run, tau=args.tau)


async def _mock_serve(args: argparse.Namespace) -> JsonDict:
    try:
        backends = mock_backend_set(
            args.detector,
            args.segmenter,
            args.inpainter,
            detector_options=dict(args.detector_options),
            segmenter_options=dict(args.segmenter_options),
            inpainter_options=dict(args.inpainter_options),
        )
    except ValueError as exc:
        return {"error": str(exc), "category": "config", "exit_code": EXIT_CONFIG}
    await serve(backends, host=args.host, port=args.port)
    return {"status": "stopped", "host": args.host, "port": args.port}


async def _environments(args: argparse.Namespace) -> JsonDict:
    del args
    return await server.list_environments()


async def _prompt(args: argparse.Namespace) -> JsonDict:
    return await server.get_prompt_text(
        model_family=args.model_family,
        purpose=args.purpose,
        class_label=args.class_label,
        environment=args.environment,
        target_class=args.target_class,
    )


async def _check_backends(args: argparse.Namespace) -> JsonDict:
    return await server.check_backends(config_path=args.config)
