from __future__ import annotations

import json
import threading
import urllib.error
import urllib.parse
import urllib.request

import pytest

from qacgen.config import build_engine, load_config
from qacgen.httpapi import make_server
from qacgen.serving import CacheSnapshot, pregenerate_cache, save_snapshot
from qacgen.context import Prefix


@pytest.fixture()
def server(demo_config_path):
    engine = build_engine(load_config(demo_config_path))
    srv = make_server(engine, host="127.0.0.1", port=0)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    host, port = srv.server_address[:2]
    try:
        yield f"http://{host}:{port}", engine
    finally:
        srv.shutdown()
        srv.server_close()


def get_json(url: str) -> dict:
    with urllib.request.urlopen(url, timeout=10) as response:
        return json.loads(response.read())


def post_json(url: str, payload: dict) -> tuple[int, dict]:
    data = json.dumps(payload).encode()
    request = urllib.request.Request(
        url, data=data, headers={"Content-Type": "application/json"}
    )
    try:
        with urllib.request.urlopen(request, timeout=10) as response:
            return response.status, json.loads(response.read())
    except urllib.error.HTTPError as err:
        return err.code, json.loads(err.read())


class TestCompleteEndpoint:
    def test_complete_returns_suggestions(self, server):
        base, _ = server
        prefix = urllib.parse.quote("wor")
        body = get_json(f"{base}/v1/complete?prefix={prefix}&limit=5")
        assert body["cache_hit"] is False
        assert body["degraded"] is False
        assert 1 <= len(body["suggestions"]) <= 5
        first = body["suggestions"][0]
        assert set(first) == {"query", "grounded", "cached_rank"}
        assert body["latency_us"] >= 0

    def test_cache_hit_reported(self, server, tmp_path):
        base, engine = server
        snapshot, _ = pregenerate_cache(engine, [Prefix(text="wor")])
        engine.swap_snapshot(snapshot)
        body = get_json(f"{base}/v1/complete?prefix=wor")
        assert body["cache_hit"] is True
        assert body["snapshot_version"] == engine.snapshot_version
        assert body["suggestions"][0]["cached_rank"] == 1

    def test_bad_limit_is_400(self, server):
        base, _ = server
        for limit in ("abc", "0"):
            try:
                urllib.request.urlopen(f"{base}/v1/complete?prefix=a&limit={limit}")
                raised = False
            except urllib.error.HTTPError as err:
                raised = err.code == 400
            assert raised

    def test_unknown_path_404(self, server):
        base, _ = server
        with pytest.raises(urllib.error.HTTPError) as exc:
            urllib.request.urlopen(f"{base}/v1/nope")
        assert exc.value.code == 404

    def test_cors_header_present(self, server):
        base, _ = server
        with urllib.request.urlopen(f"{base}/v1/health") as response:
            assert response.headers["Access-Control-Allow-Origin"] == "*"


class TestHealthAndReload:
    def test_health(self, server):
        base, engine = server
        body = get_json(f"{base}/v1/health")
        assert body["status"] == "ok"
        assert body["snapshot_version"] == engine.snapshot_version
        assert body["cache_entries"] == 0

    def test_reload_swaps_snapshot(self, server, tmp_path):
        base, engine = server
        snapshot, _ = pregenerate_cache(engine, [Prefix(text="wor"), Prefix(text="slee")])
        path = tmp_path / "snap.jsonl"
        save_snapshot(snapshot, str(path))
        status, body = post_json(f"{base}/v1/admin/reload", {"path": str(path)})
        assert status == 200
        assert body["cache_entries"] == 2
        assert get_json(f"{base}/v1/complete?prefix=wor")["cache_hit"] is True

    def test_reload_corrupt_file_is_409_and_keeps_old(self, server, tmp_path):
        base, engine = server
        old_version = engine.snapshot_version
        bad = tmp_path / "bad.jsonl"
        bad.write_text("junk\n")
        status, body = post_json(f"{base}/v1/admin/reload", {"path": str(bad)})
        assert status == 409
        assert engine.snapshot_version == old_version

    def test_reload_requires_path_key(self, server):
        base, _ = server
        status, _ = post_json(f"{base}/v1/admin/reload", {"nope": 1})
        assert status == 400
