"""Minimal HTTP front for the serving engine.

Endpoints:
  GET  /v1/complete?prefix=<urlencoded>&limit=<n>
  GET  /v1/health
  POST /v1/admin/reload    body: {"path": "<snapshot file>"}

Responses are JSON; CORS is wide open so a static demo page can talk to a
locally running engine.
"""

from __future__ import annotations

import json
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from .serving import CorruptSnapshot, ServeResult, ServingEngine, load_snapshot


def result_payload(result: ServeResult) -> dict:
    return {
        "suggestions": [
            {
                "query": query,
                "grounded": result.grounded[i],
                "cached_rank": result.cached_rank[i],
            }
            for i, query in enumerate(result.suggestions.queries)
        ],
        "cache_hit": result.cache_hit,
        "degraded": result.degraded,
        "latency_us": result.latency_us,
        "snapshot_version": result.snapshot_version,
    }


class _Handler(BaseHTTPRequestHandler):
    engine: ServingEngine  # set by make_server

    def _send(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.end_headers()
        self.wfile.write(body)

    def do_OPTIONS(self) -> None:  # noqa: N802 (http.server naming)
        self._send(204, {})

    def do_GET(self) -> None:  # noqa: N802
        url = urlparse(self.path)
        if url.path == "/v1/complete":
            params = parse_qs(url.query)
            prefix = params.get("prefix", [""])[0]
            try:
                limit = int(params.get("limit", ["10"])[0])
            except ValueError:
                self._send(400, {"error": "limit must be an integer"})
                return
            if limit < 1:
                self._send(400, {"error": "limit must be >= 1"})
                return
            result = self.engine.serve_complete(prefix, limit=limit)
            self._send(200, result_payload(result))
        elif url.path == "/v1/health":
            self._send(
                200,
                {
                    "status": "ok",
                    "snapshot_version": self.engine.snapshot_version,
                    "cache_entries": self.engine.cache_entries,
                },
            )
        else:
            self._send(404, {"error": f"no such path {url.path}"})

    def do_POST(self) -> None:  # noqa: N802
        url = urlparse(self.path)
        if url.path != "/v1/admin/reload":
            self._send(404, {"error": f"no such path {url.path}"})
            return
        length = int(self.headers.get("Content-Length", "0"))
        try:
            body = json.loads(self.rfile.read(length) or b"{}")
            path = body["path"]
        except (json.JSONDecodeError, KeyError):
            self._send(400, {"error": "body must be JSON with a 'path' key"})
            return
        try:
            snapshot = load_snapshot(path)
        except CorruptSnapshot as exc:
            self._send(409, {"error": str(exc), "snapshot_version": self.engine.snapshot_version})
            return
        version = self.engine.swap_snapshot(snapshot)
        self._send(200, {"snapshot_version": version, "cache_entries": self.engine.cache_entries})

    def log_message(self, fmt: str, *args) -> None:
        pass  # quiet by default; the CLI prints its own startup line


def make_server(engine: ServingEngine, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    handler = type("EngineHandler", (_Handler,), {"engine": engine})
    return ThreadingHTTPServer((host, port), handler)
