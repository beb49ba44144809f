"""HTTP host for a recorded scorer fixture (``POST /v1/score``, ``GET /v1/info``)."""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .scorer import FixtureMissing, FixtureScorer, ScoreRequest

log = logging.getLogger(__name__)

MAX_BODY = 16 * 1024 * 1024


def _handler(scorer: FixtureScorer) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        # headers and body go out as separate writes; Nagle would stall each reply
        disable_nagle_algorithm = True

        def _send(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path == "/v1/info":
                self._send(200, {"scorer": scorer.identity, "entries": len(scorer.entries)})
            else:
                self._send(404, {"error": "not found"})

        def do_POST(self):
            if self.path != "/v1/score":
                self._send(404, {"error": "not found"})
                return
            length = int(self.headers.get("Content-Length") or 0)
            if length <= 0 or length > MAX_BODY:
                self._send(400, {"error": "missing or oversized body"})
                return
            try:
                payload = json.loads(self.rfile.read(length))
                request = ScoreRequest(payload["instruction"], tuple(payload["candidates"]))
            except (ValueError, KeyError, TypeError) as exc:
                self._send(400, {"error": f"bad request: {exc}"})
                return
            try:
                scores = scorer.score(request)
            except FixtureMissing as exc:
                self._send(404, {"error": str(exc)})
                return
            self._send(200, {"scores": [s.as_dict() for s in scores]})

        def log_message(self, fmt, *args):
            log.debug("%s - %s", self.address_string(), fmt % args)

    return Handler


def make_server(scorer: FixtureScorer, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Bound but not yet serving; ``port=0`` picks a free port."""
    server = ThreadingHTTPServer((host, port), _handler(scorer))
    server.daemon_threads = True
    return server


class BackgroundServer:
    """Context manager running a fixture server on a daemon thread."""

    def __init__(self, scorer: FixtureScorer, host: str = "127.0.0.1", port: int = 0):
        self.server = make_server(scorer, host, port)
        self._thread = threading.Thread(target=self.server.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self) -> BackgroundServer:
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self.server.shutdown()
        self.server.server_close()
        self._thread.join(timeout=5)
