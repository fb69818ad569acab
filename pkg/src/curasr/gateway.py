"""Uniform HTTP clients for ASR engines, the teacher endpoint, and remote scorers.

Wire contract (JSON over HTTP, all POST):
    {base}/transcribe  {"uri": ...}                      -> {"text": ..., "confidence"?: ...}
    {base}/describe    {"uri": ..., "prompt": ...}       -> {"text": ...}
    {base}/score       {"text": ..., "context_token": ...} -> {"token_logprobs": [...]}

An empty transcript is a valid result, never an error; engine failures
surface as typed exceptions tagged with the engine id so a clip can be
marked unprocessed instead of silently empty. Transport failures and 5xx
responses are retried with exponential backoff, at most 1 + max_retries
attempts per call.

If the TAI_GATEWAY_TOKEN environment variable is set at gateway construction
time, its value is passed through as a bearer token on every request.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import httpx

from .core import AudioClipRef, Candidate, CandidateSet
from .similarity import NormalizerConfig, normalize_text

logger = logging.getLogger(__name__)

TOKEN_ENV_VAR = "TAI_GATEWAY_TOKEN"


class GatewayError(Exception):
    """Base class for endpoint failures; carries the failing engine id."""

    def __init__(self, message: str, *, engine_id: str = ""):
        super().__init__(message)
        self.engine_id = engine_id


class GatewayTimeout(GatewayError):
    """No usable response after all retry attempts."""


class EngineError(GatewayError):
    """The endpoint answered with a non-success status."""

    def __init__(self, message: str, *, engine_id: str = "", status: int = 0, body: str = ""):
        super().__init__(message, engine_id=engine_id)
        self.status = status
        self.body = body


class MalformedResponse(GatewayError):
    """The endpoint answered 200 but the payload does not match the contract."""


@dataclass(frozen=True, slots=True)
class EngineConfig:
    """One endpoint: id, base URL, and its retry/timeout policy."""

    engine_id: str
    endpoint_url: str
    timeout_ms: int = 10_000
    max_retries: int = 2
    backoff_base_ms: int = 100

    def __post_init__(self) -> None:
        if not self.engine_id:
            raise ValueError("engine_id must be non-empty")
        if not self.endpoint_url:
            raise ValueError(f"engine {self.engine_id}: endpoint_url must be non-empty")
        if self.timeout_ms <= 0:
            raise ValueError(f"engine {self.engine_id}: timeout_ms must be positive")
        if self.max_retries < 0:
            raise ValueError(f"engine {self.engine_id}: max_retries must be >= 0")
        if self.backoff_base_ms <= 0:
            raise ValueError(f"engine {self.engine_id}: backoff_base_ms must be positive")


@dataclass(frozen=True, slots=True)
class TranscriptionResult:
    engine_id: str
    raw_text: str
    latency_ms: int

    def __post_init__(self) -> None:
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be >= 0")


def _excerpt(text: str, limit: int = 200) -> str:
    return text if len(text) <= limit else text[:limit] + "..."


class Gateway:
    """Shared HTTP client for all endpoints; safe for concurrent use.

    One instance serves the whole worker pool: the underlying connection pool
    is sized for `max_connections` in-flight requests and each call is
    independent. Normalization of candidate texts uses the configured
    normalizer so CandidateSet contents stay deterministic.
    """

    def __init__(
        self,
        *,
        normalizer: NormalizerConfig | None = None,
        max_connections: int = 64,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self._normalizer = normalizer or NormalizerConfig()
        self._sleep = sleep
        headers = {}
        token = os.environ.get(TOKEN_ENV_VAR)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(
            headers=headers,
            limits=httpx.Limits(max_connections=max_connections),
        )

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "Gateway":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def _post(self, engine: EngineConfig, path: str, payload: dict) -> dict:
        url = engine.endpoint_url.rstrip("/") + path
        timeout = engine.timeout_ms / 1000.0
        attempts = engine.max_retries + 1
        last_failure = ""
        for attempt in range(attempts):
            if attempt:
                self._sleep(engine.backoff_base_ms * 2 ** (attempt - 1) / 1000.0)
            try:
                response = self._client.post(url, json=payload, timeout=timeout)
            except httpx.TransportError as exc:
                last_failure = f"{type(exc).__name__}: {exc}"
                logger.debug(
                    "engine %s attempt %d/%d failed: %s",
                    engine.engine_id, attempt + 1, attempts, last_failure,
                )
                continue
            if response.status_code >= 500 and attempt + 1 < attempts:
                last_failure = f"status {response.status_code}"
                continue
            if response.status_code != 200:
                raise EngineError(
                    f"engine {engine.engine_id}: status {response.status_code}",
                    engine_id=engine.engine_id,
                    status=response.status_code,
                    body=_excerpt(response.text),
                )
            try:
                data = response.json()
            except ValueError:
                raise MalformedResponse(
                    f"engine {engine.engine_id}: response is not JSON: "
                    f"{_excerpt(response.text)}",
                    engine_id=engine.engine_id,
                ) from None
            if not isinstance(data, dict):
                raise MalformedResponse(
                    f"engine {engine.engine_id}: response is not an object: "
                    f"{_excerpt(response.text)}",
                    engine_id=engine.engine_id,
                )
            return data
        raise GatewayTimeout(
            f"engine {engine.engine_id}: no response after {attempts} attempts "
            f"({last_failure})",
            engine_id=engine.engine_id,
        )

    def _text_field(self, engine: EngineConfig, data: dict) -> str:
        text = data.get("text")
        if not isinstance(text, str):
            raise MalformedResponse(
                f"engine {engine.engine_id}: missing or non-string 'text' field: "
                f"{_excerpt(repr(data))}",
                engine_id=engine.engine_id,
            )
        return text

    def transcribe(self, clip: AudioClipRef, engine: EngineConfig) -> TranscriptionResult:
        """One engine's verbatim transcript for a clip; "" means no speech detected."""
        started = time.perf_counter()
        data = self._post(engine, "/transcribe", {"uri": clip.uri})
        latency_ms = int((time.perf_counter() - started) * 1000)
        return TranscriptionResult(
            engine_id=engine.engine_id,
            raw_text=self._text_field(engine, data),
            latency_ms=latency_ms,
        )

    def transcribe_pair(
        self, clip: AudioClipRef, engines: Sequence[EngineConfig]
    ) -> CandidateSet:
        """Both engines concurrently; candidates assembled in configured order.

        Fails whole: if either call errors the pair errors (no half-filled
        candidate set), naming the first failing engine in configured order.
        """
        if len(engines) != 2:
            raise ValueError(f"transcribe_pair requires exactly 2 engines, got {len(engines)}")
        if engines[0].engine_id == engines[1].engine_id:
            raise ValueError(f"engine ids must be distinct, got {engines[0].engine_id!r} twice")
        with ThreadPoolExecutor(max_workers=2) as pool:
            futures = [pool.submit(self.transcribe, clip, engine) for engine in engines]
            results = []
            first_error: BaseException | None = None
            for future in futures:
                try:
                    results.append(future.result())
                except GatewayError as exc:
                    results.append(None)
                    if first_error is None:
                        first_error = exc
        if first_error is not None:
            raise first_error
        candidates = tuple(
            Candidate(
                engine_id=result.engine_id,
                raw_text=result.raw_text,
                normalized_text=normalize_text(result.raw_text, self._normalizer),
            )
            for result in results
        )
        return CandidateSet(clip_id=clip.clip_id, candidates=candidates)

    def teacher_call(self, prompt: str, audio_uri: str, endpoint: EngineConfig) -> str:
        """Teacher response text, verbatim."""
        data = self._post(endpoint, "/describe", {"uri": audio_uri, "prompt": prompt})
        return self._text_field(endpoint, data)

    def score_call(self, text: str, context_token: str, endpoint: EngineConfig) -> list[float]:
        """Per-token log-probabilities from a model-serving endpoint."""
        data = self._post(endpoint, "/score", {"text": text, "context_token": context_token})
        raw = data.get("token_logprobs")
        if not isinstance(raw, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw
        ):
            raise MalformedResponse(
                f"engine {endpoint.engine_id}: missing or non-numeric 'token_logprobs': "
                f"{_excerpt(repr(data))}",
                engine_id=endpoint.engine_id,
            )
        logprobs = [float(v) for v in raw]
        if any(v > 0 for v in logprobs):
            raise MalformedResponse(
                f"engine {endpoint.engine_id}: positive log-probabilities in response",
                engine_id=endpoint.engine_id,
            )
        return logprobs
