"""Fixture-scripted mock endpoints: ASR engines, teacher, and scorer in one server.

The server speaks the production wire contract, so clients run against it
unchanged. Engines are addressed by base-URL path prefix: point an engine
config at ``{base_url}/{engine_name}`` and its calls arrive as
``POST /{engine_name}/transcribe``. The scorer lives at ``{base_url}/scorer``.

Fixture file (JSON):

    {
      "engines": {
        "alpha": {
          "clip-0001": {"text": "hello"},
          "clip-0002": {"empty": true},
          "clip-0003": {"error": 500},
          "clip-0004": {"timeout": true},
          "clip-0005": {"text": "hi", "delay_ms": 300},
          "clip-0006": {"malformed": true},
          "clip-0007": {"text": "hi", "delay_jitter_ms": 20}
        }
      },
      "default_engine_behavior": {"text": ""},
      "teacher": {
        "clip-0001": {"caption": "street market chatter",
                       "verdict": "ACCEPT",
                       "pairs": [{"instruction": "...", "response": "..."}]}
      },
      "teacher_defaults": {"caption": "", "verdict": "ACCEPT", "pairs": []},
      "markers": {"critique": "...", "expand": "..."},
      "scorer_seed": 0,
      "timeout_hold_s": 2.0
    }

Clips are looked up by the final path component of the request's audio URI,
extension stripped ("mock://clips/clip-0001.wav" -> "clip-0001"). A
"timeout" behavior holds the connection briefly and then closes it without
responding. Teacher requests are told apart by marker phrases in the prompt
(defaults match the built-in prompt templates): the critique marker selects
the scripted verdict, the expand marker the scripted pairs, anything else
the caption.

Every handled request increments a hit counter keyed "name/op/clip", served
at GET /hits and cleared by POST /reset, so tests can assert attempt counts.
"""

from __future__ import annotations

import json
import logging
import random
import socket
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path, PurePosixPath
from urllib.parse import urlparse

from .arbiter import AcousticContext, ReferenceScorer
from .curation import CRITIQUE_MARKER, EXPAND_MARKER

logger = logging.getLogger(__name__)


def clip_key_for_uri(uri: str) -> str:
    """Fixture lookup key: last URI path segment without its extension."""
    path = urlparse(uri).path or uri
    return PurePosixPath(path).stem or uri


class _MockHTTPServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, handler, fixture: dict):
        super().__init__(address, handler)
        self.fixture = fixture
        self.hits: dict[str, int] = {}
        self.requests: list[tuple[str, dict]] = []
        self.hits_lock = threading.Lock()

    def count_hit(self, key: str) -> None:
        with self.hits_lock:
            self.hits[key] = self.hits.get(key, 0) + 1

    def record_request(self, path: str, payload: dict) -> None:
        if not self.fixture.get("record_requests"):
            return
        with self.hits_lock:
            self.requests.append((path, payload))

    def snapshot_requests(self) -> list[tuple[str, dict]]:
        with self.hits_lock:
            return list(self.requests)

    def snapshot_hits(self) -> dict[str, int]:
        with self.hits_lock:
            return dict(self.hits)

    def reset_hits(self) -> None:
        with self.hits_lock:
            self.hits.clear()


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: _MockHTTPServer

    def log_message(self, fmt, *args):  # quiet: route through module logger
        logger.debug("mock server: " + fmt, *args)

    def _send_json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_raw(self, status: int, body: bytes) -> None:
        self.send_response(status)
        self.send_header("Content-Type", "text/plain")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _drop_connection(self) -> None:
        try:
            self.connection.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.close_connection = True

    def _read_payload(self) -> dict | None:
        length = int(self.headers.get("Content-Length", 0))
        try:
            return json.loads(self.rfile.read(length))
        except ValueError:
            self._send_json(400, {"error": "request body is not JSON"})
            return None

    def _apply_common_behavior(self, behavior: dict) -> bool:
        """Delays, scripted failures. Returns False when a response was already
        produced (or deliberately withheld)."""
        if behavior.get("delay_ms"):
            time.sleep(behavior["delay_ms"] / 1000.0)
        if behavior.get("delay_jitter_ms"):
            time.sleep(random.uniform(0, behavior["delay_jitter_ms"] / 1000.0))
        if behavior.get("timeout"):
            time.sleep(float(self.server.fixture.get("timeout_hold_s", 2.0)))
            self._drop_connection()
            return False
        if behavior.get("error"):
            self._send_json(int(behavior["error"]), {"error": "scripted failure"})
            return False
        if behavior.get("malformed"):
            self._send_raw(200, b"this is not json {{{")
            return False
        return True

    def do_POST(self) -> None:
        segments = [s for s in self.path.split("/") if s]
        if not segments:
            self._send_json(404, {"error": "no route"})
            return
        op = segments[-1]
        name = segments[0] if len(segments) > 1 else ""
        payload = self._read_payload()
        if payload is None:
            return
        self.server.record_request(self.path, payload)
        if op == "reset":
            self.server.reset_hits()
            self._send_json(200, {"ok": True})
        elif op == "transcribe":
            self._handle_transcribe(name, payload)
        elif op == "describe":
            self._handle_describe(name, payload)
        elif op == "score":
            self._handle_score(name, payload)
        else:
            self._send_json(404, {"error": f"unknown operation {op!r}"})

    def do_GET(self) -> None:
        if self.path.rstrip("/") == "/hits":
            self._send_json(200, {"hits": self.server.snapshot_hits()})
        else:
            self._send_json(404, {"error": "no route"})

    def _handle_transcribe(self, name: str, payload: dict) -> None:
        clip = clip_key_for_uri(str(payload.get("uri", "")))
        self.server.count_hit(f"{name or '-'}/transcribe/{clip}")
        engines = self.server.fixture.get("engines", {})
        behavior = engines.get(name, {}).get(clip)
        if behavior is None:
            behavior = self.server.fixture.get("default_engine_behavior")
        if behavior is None:
            self._send_json(404, {"error": f"no fixture for engine {name!r} clip {clip!r}"})
            return
        if not self._apply_common_behavior(behavior):
            return
        text = "" if behavior.get("empty") else behavior.get("text", "")
        response = {"text": text}
        if "confidence" in behavior:
            response["confidence"] = behavior["confidence"]
        self._send_json(200, response)

    def _handle_describe(self, name: str, payload: dict) -> None:
        clip = clip_key_for_uri(str(payload.get("uri", "")))
        self.server.count_hit(f"{name or '-'}/describe/{clip}")
        fixture = self.server.fixture
        entry = fixture.get("teacher", {}).get(clip)
        if entry is None:
            entry = fixture.get("teacher_defaults")
        if entry is None:
            self._send_json(404, {"error": f"no teacher fixture for clip {clip!r}"})
            return
        if not self._apply_common_behavior(entry):
            return
        markers = fixture.get("markers", {})
        prompt = str(payload.get("prompt", ""))
        if markers.get("critique", CRITIQUE_MARKER) in prompt:
            text = entry.get("verdict", "ACCEPT")
        elif markers.get("expand", EXPAND_MARKER) in prompt:
            text = "\n".join(
                f"Q: {pair['instruction']}\nA: {pair['response']}"
                for pair in entry.get("pairs", [])
            )
        else:
            text = entry.get("caption", "")
        self._send_json(200, {"text": text})

    def _handle_score(self, name: str, payload: dict) -> None:
        text = str(payload.get("text", ""))
        token = str(payload.get("context_token", ""))
        self.server.count_hit(f"{name or '-'}/score/{token}")
        if not text:
            self._send_json(400, {"error": "cannot score empty text"})
            return
        scorer = ReferenceScorer(int(self.server.fixture.get("scorer_seed", 0)))
        logprobs = scorer.score(text, AcousticContext(clip_uri="", context_token=token))
        self._send_json(200, {"token_logprobs": logprobs})


class MockServer:
    """In-process mock server; context-manageable for tests, CLI-launchable
    for offline runs."""

    def __init__(self, fixture: dict, host: str = "127.0.0.1", port: int = 0):
        self._fixture = fixture
        self._host = host
        self._port = port
        self._httpd: _MockHTTPServer | None = None
        self._thread: threading.Thread | None = None

    @classmethod
    def from_file(cls, path: Path | str, host: str = "127.0.0.1", port: int = 0) -> "MockServer":
        fixture = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(fixture, host=host, port=port)

    def start(self) -> "MockServer":
        self._httpd = _MockHTTPServer((self._host, self._port), _Handler, self._fixture)
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None

    def __enter__(self) -> "MockServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()

    @property
    def base_url(self) -> str:
        assert self._httpd is not None, "server not started"
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def endpoint_url(self, name: str) -> str:
        return f"{self.base_url}/{name}"

    def hits(self) -> dict[str, int]:
        assert self._httpd is not None, "server not started"
        return self._httpd.snapshot_hits()

    def hit_count(self, name: str, op: str, clip: str) -> int:
        return self.hits().get(f"{name}/{op}/{clip}", 0)

    def requests(self) -> list[tuple[str, dict]]:
        """Recorded (path, payload) tuples; enable with fixture key record_requests."""
        assert self._httpd is not None, "server not started"
        return self._httpd.snapshot_requests()

    def reset_hits(self) -> None:
        assert self._httpd is not None, "server not started"
        self._httpd.reset_hits()
