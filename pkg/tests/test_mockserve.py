"""Tests for the wire-schema server."""

from __future__ import annotations

import base64

import httpx

from perturbex import runner
from perturbex.core import encode_png
from perturbex.mocks import make_blob_image
from perturbex.mockserve import create_app, mock_backend_set


def _client() -> httpx.AsyncClient:
    app = create_app(mock_backend_set())
    return httpx.AsyncClient(transport=httpx.ASGITransport(app=app), base_url="http://mock")


async def test_health_route():
    async with _client() as client:
        response = await client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "ok", "model": "mock:fill-inpainter"}


async def test_detect_route_wire_format():
    image = make_blob_image(64, 64, [(30.0, 30.0, 10.0, 10.0)])
    async with _client() as client:
        response = await client.post(
            "/detect", json={"image": base64.b64encode(encode_png(image)).decode("ascii")}
        )
    body = response.json()
    assert response.status_code == 200
    assert len(body["detections"]) == 1
    assert set(body["detections"][0]) == {"class", "bbox", "confidence"}


async def test_bad_requests_are_400():
    async with _client() as client:
        not_json = await client.post("/detect", content=b"{nope")
        bad_b64 = await client.post("/detect", json={"image": "%%%"})
        bad_boxes = await client.post(
            "/segment",
            json={
                "image": base64.b64encode(encode_png(make_blob_image(8, 8, []))).decode("ascii"),
                "boxes": [[1, 2]],
            },
        )
    assert not_json.status_code == 400
    assert bad_b64.status_code == 400
    assert bad_boxes.status_code == 400
    assert "boxes" in bad_boxes.json()["error"]


async def test_http_run_reproduces_in_process_run(make_config, tmp_path):
    local = await runner.run(make_config(output_dir=str(tmp_path / "local"), cache_dir=str(tmp_path / "c1")))

    http_backends = {
        "detector": {"endpoint": "http://mock"},
        "segmenter": {"endpoint": "http://mock"},
        "inpainter": {"endpoint": "http://mock"},
    }
    remote_config = make_config(
        backends=http_backends,
        output_dir=str(tmp_path / "remote"),
        cache_dir=str(tmp_path / "c2"),
    )
    transport = httpx.ASGITransport(app=create_app(mock_backend_set()))
    remote = await runner.run(remote_config, transport=transport)

    for name in (runner.RECORDS_FILE, runner.SUMMARY_JSON, runner.SUMMARY_CSV):
        assert (local.output_dir / name).read_bytes() == (remote.output_dir / name).read_bytes()
    local_artifacts = sorted(p.relative_to(local.output_dir) for p in local.output_dir.rglob("*.png"))
    remote_artifacts = sorted(p.relative_to(remote.output_dir) for p in remote.output_dir.rglob("*.png"))
    assert local_artifacts == remote_artifacts
    for rel in local_artifacts:
        assert (local.output_dir / rel).read_bytes() == (remote.output_dir / rel).read_bytes()
