"""Tests for CLI and entrypoint behavior."""

from __future__ import annotations

import json

from perturbex import cli, entrypoint
from perturbex.runner import SUMMARY_JSON


def test_entrypoint_no_args_calls_server(monkeypatch):
    called = []

    def fake_server_main(**kwargs) -> None:
        called.append(kwargs)

    monkeypatch.setattr(entrypoint.server, "main", fake_server_main)

    exit_code = entrypoint.main([])

    assert exit_code == 0
    assert called == [{"transport": "stdio", "host": "127.0.0.1", "port": 8000}]


def test_entrypoint_serve_over_http(monkeypatch):
    called = []

    def fake_server_main(**kwargs) -> None:
        called.append(kwargs)

    monkeypatch.setattr(entrypoint.server, "main", fake_server_main)

    exit_code = entrypoint.main(["serve", "--transport", "http", "--port", "9000"])

    assert exit_code == 0
    assert called[0]["transport"] == "http"
    assert called[0]["port"] == 9000


def test_entrypoint_serve_rejects_unknown_transport(monkeypatch):
    monkeypatch.setattr(entrypoint.server, "main", lambda **kwargs: None)
    assert entrypoint.main(["serve", "--transport", "carrier-pigeon"]) == 2


def test_entrypoint_forwards_to_cli(capsys):
    exit_code = entrypoint.main(["environments"])
    payload = json.loads(capsys.readouterr().out)

    assert exit_code == 0
    assert payload["count"] == 15


def test_run_outputs_summary(config_file, tmp_path, capsys):
    exit_code = cli.main(["run", "--config", str(config_file())])
    payload = json.loads(capsys.readouterr().out)

    assert exit_code == 0
    assert payload["records"] == 10
    assert payload["summaries"][0]["flip_rate"] == 1.0
    assert (tmp_path / "run" / SUMMARY_JSON).exists()


def test_run_flags_override_the_file(config_file, tmp_path, capsys):
    out = tmp_path / "bbox-run"
    exit_code = cli.main(
        ["run", "--config", str(config_file()), "--mask-mode", "bbox", "--output-dir", str(out)]
    )
    payload = json.loads(capsys.readouterr().out)

    assert exit_code == 0
    assert payload["summaries"][0]["condition"] == "removal-bbox"
    assert (out / SUMMARY_JSON).exists()


def test_missing_config_returns_2(tmp_path, capsys):
    exit_code = cli.main(["run", "--config", str(tmp_path / "absent.toml")])
    payload = json.loads(capsys.readouterr().out)

    assert exit_code == 2
    assert payload["category"] == "config"
    assert "not found" in payload["error"]


def test_tau_out_of_range_returns_2(config_file, capsys):
    exit_code = cli.main(["run", "--config", str(config_file()), "--tau", "1.5"])
    payload = json.loads(capsys.readouterr().out)

    assert exit_code == 2
    assert "tau" in payload["error"]


def test_cli_invalid_args_returns_2_and_json_error(capsys):
    exit_code = cli.main(["run"])
    payload = json.loads(capsys.readouterr().out)

    assert exit_code == 2
    assert "error" in payload


def test_version(capsys):
    exit_code = cli.main(["--version"])

    assert exit_code == 0
    assert capsys.readouterr().out.startswith("perturbex ")


def test_prompt_command(capsys):
    exit_code = cli.main(
        [
            "prompt",
            "--model-family",
            "sdxl",
            "--purpose",
            "per_class_negative",
            "--class-label",
            "seal",
        ]
    )
    payload = json.loads(capsys.readouterr().out)

    assert exit_code == 0
    assert payload["negative"].startswith("seal, duplicate")


def test_summarize_and_report(config_file, tmp_path, capsys):
    cli.main(["run", "--config", str(config_file())])
    capsys.readouterr()
    run_dir = tmp_path / "run"

    assert cli.main(["summarize", "--run", str(run_dir), "--tau", "0.9"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["summaries"][0]["tau"] == 0.9

    assert cli.main(["report", "--run", str(run_dir)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["index"].endswith("index.html")
    assert report["warnings"] == []


def test_check_backends(config_file, capsys):
    exit_code = cli.main(["check-backends", "--config", str(config_file())])
    payload = json.loads(capsys.readouterr().out)

    assert exit_code == 0
    assert payload["healthy"] is True
    assert set(payload["backends"]) == {"detector", "segmenter", "inpainter"}


def test_mock_serve_passes_mock_options(monkeypatch, capsys):
    served = []

    async def fake_serve(backends, *, host, port) -> None:
        served.append((backends, host, port))

    monkeypatch.setattr(cli, "serve", fake_serve)
    exit_code = cli.main(
        [
            "mock-serve",
            "--port",
            "9100",
            "--inpainter",
            "stamp-inpainter",
            "--inpainter-option",
            "target=car",
            "--detector-option",
            "area_scale=500",
            "--detector-option",
            "class_label=dog",
        ]
    )
    payload = json.loads(capsys.readouterr().out)

    assert exit_code == 0
    assert payload["port"] == 9100
    backends, _, port = served[0]
    assert port == 9100
    assert backends.inpainter.target == "car"
    assert backends.detector.area_scale == 500.0
    assert backends.detector.class_label == "dog"


def test_mock_serve_rejects_bad_options(monkeypatch, capsys):
    async def fake_serve(backends, *, host, port) -> None:
        raise AssertionError("server should not start")

    monkeypatch.setattr(cli, "serve", fake_serve)
    assert cli.main(["mock-serve", "--inpainter-option", "ring_px"]) == 2
    capsys.readouterr()
    assert cli.main(["mock-serve", "--inpainter-option", "ring_px=wide"]) == 2
    assert json.loads(capsys.readouterr().out)["category"] == "config"
