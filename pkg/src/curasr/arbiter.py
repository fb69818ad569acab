"""Inference-time selection among candidate transcriptions.

Each non-empty candidate is scored by acoustically-conditioned perplexity:
exp of the mean negative per-token log-probability under a scorer backend
that sees the audio context. The candidate with the minimal perplexity wins,
ties resolving to the first engine in configured order so manifests stay
reproducible. When every candidate normalizes to empty text the arbiter
bypasses text injection entirely (pure-audio mode) and never calls the
scorer.

Scorer backends implement `score(text, ctx) -> list[logprob]`:
  - RemoteModelScorer: network client to a model-serving endpoint
  - ReferenceScorer: deterministic seeded-hash character model for tests

Token count per candidate is whatever the backend's own tokenization says;
for ReferenceScorer that is one token per code point.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Protocol, Sequence

from .core import CandidateSet
from .gateway import EngineConfig, Gateway

logger = logging.getLogger(__name__)

_PPL_REL_TOL = 1e-12
_REFERENCE_MIN_P = 0.01


class ArbitrationError(Exception):
    """Scorer failure during arbitration; carries the engine whose candidate failed."""

    def __init__(self, message: str, *, engine_id: str = ""):
        super().__init__(message)
        self.engine_id = engine_id


@dataclass(frozen=True, slots=True)
class AcousticContext:
    """Opaque handle to the audio the scorer conditions on.

    The context token stands in for the latent acoustic representation; only
    the scorer backend interprets it.
    """

    clip_uri: str
    context_token: str


def ac_ppl(token_logprobs: Sequence[float]) -> float:
    """exp(-mean(token_logprobs)); always >= 1 for valid log-probabilities."""
    if not token_logprobs:
        raise ValueError("token_logprobs must be non-empty")
    for lp in token_logprobs:
        if not math.isfinite(lp) or lp > 0:
            raise ValueError(f"log-probabilities must be finite and <= 0, got {lp}")
    return math.exp(-math.fsum(token_logprobs) / len(token_logprobs))


@dataclass(frozen=True, slots=True)
class ScoredCandidate:
    """A transcription hypothesis with its per-token log-probabilities.

    `token_logprobs` and `ac_ppl` are None for selections made without
    scoring (single-engine injection, degraded fallback).
    """

    engine_id: str
    text: str
    token_logprobs: tuple[float, ...] | None
    ac_ppl: float | None

    def __post_init__(self) -> None:
        if (self.token_logprobs is None) != (self.ac_ppl is None):
            raise ValueError("token_logprobs and ac_ppl must be set together")
        if self.token_logprobs is not None:
            expected = ac_ppl(self.token_logprobs)
            if not math.isclose(self.ac_ppl, expected, rel_tol=_PPL_REL_TOL):
                raise ValueError(
                    f"ac_ppl {self.ac_ppl!r} does not match log-probabilities "
                    f"(expected {expected!r})"
                )

    @classmethod
    def from_logprobs(
        cls, engine_id: str, text: str, token_logprobs: Sequence[float]
    ) -> "ScoredCandidate":
        logprobs = tuple(float(lp) for lp in token_logprobs)
        return cls(engine_id, text, logprobs, ac_ppl(logprobs))

    @classmethod
    def unscored(cls, engine_id: str, text: str) -> "ScoredCandidate":
        return cls(engine_id, text, None, None)


@dataclass(frozen=True, slots=True)
class ArbitrationOutcome:
    """Either a selected candidate or the pure-audio bypass.

    `scored` holds every candidate that was actually scored, for audit
    traces. `degraded` marks a fallback selection made after a scorer
    failure.
    """

    selected: ScoredCandidate | None
    scored: tuple[ScoredCandidate, ...] = ()
    degraded: bool = False

    @property
    def is_bypass(self) -> bool:
        return self.selected is None

    @classmethod
    def pure_audio_bypass(cls) -> "ArbitrationOutcome":
        return cls(selected=None)

    @classmethod
    def selection(
        cls,
        selected: ScoredCandidate,
        scored: tuple[ScoredCandidate, ...] = (),
        degraded: bool = False,
    ) -> "ArbitrationOutcome":
        return cls(selected=selected, scored=scored, degraded=degraded)


class Scorer(Protocol):
    def score(self, text: str, ctx: AcousticContext) -> list[float]:
        """Per-token log-probabilities of text conditioned on the audio context."""


class ReferenceScorer:
    """Deterministic character-level logprob source for tests and offline runs.

    Each code point's log-probability is derived from a seeded hash of the
    context token and the preceding characters, mapped into
    [ln(0.01), 0): same (text, context) always yields identical values,
    bit-for-bit, across runs and worker counts.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed

    def score(self, text: str, ctx: AcousticContext) -> list[float]:
        if not text:
            raise ValueError("cannot score empty text: callers exclude empty candidates")
        logprobs = []
        for i, ch in enumerate(text):
            material = f"{self.seed}\x1f{ctx.context_token}\x1f{text[:i]}\x1f{ch}"
            digest = hashlib.sha256(material.encode("utf-8")).digest()
            u = int.from_bytes(digest[:8], "big") / 2**64
            p = _REFERENCE_MIN_P + (1.0 - _REFERENCE_MIN_P) * u
            logprobs.append(math.log(p))
        return logprobs


class RemoteModelScorer:
    """Scorer backed by a model-serving endpoint; tokenization is the backend's."""

    def __init__(self, gateway: Gateway, endpoint: EngineConfig):
        self._gateway = gateway
        self._endpoint = endpoint

    def score(self, text: str, ctx: AcousticContext) -> list[float]:
        return self._gateway.score_call(text, ctx.context_token, self._endpoint)


def arbitrate(
    candidates: CandidateSet, ctx: AcousticContext, scorer: Scorer
) -> ArbitrationOutcome:
    """Score every non-empty candidate and select the perplexity argmin.

    All candidates normalizing to empty -> pure-audio bypass, scorer never
    called. Candidates whose normalized text is empty are excluded from
    scoring (a zero-length hypothesis has no defined perplexity). Scorer
    failure raises ArbitrationError naming the engine; fallback policy is the
    caller's (see arbitrate_with_mode).
    """
    nonempty = [c for c in candidates.candidates if c.normalized_text]
    if not nonempty:
        return ArbitrationOutcome.pure_audio_bypass()
    scored = []
    for candidate in nonempty:
        try:
            logprobs = scorer.score(candidate.raw_text, ctx)
        except Exception as exc:
            raise ArbitrationError(
                f"clip {candidates.clip_id}: scorer failed for engine "
                f"{candidate.engine_id}: {exc}",
                engine_id=candidate.engine_id,
            ) from exc
        scored.append(
            ScoredCandidate.from_logprobs(candidate.engine_id, candidate.raw_text, logprobs)
        )
    best = scored[0]
    for entry in scored[1:]:
        if entry.ac_ppl < best.ac_ppl:
            best = entry
    return ArbitrationOutcome.selection(best, tuple(scored))


class InjectionMode(str, Enum):
    """Which transcription, if any, is injected downstream."""

    NONE = "none"
    SINGLE_ASR = "single"
    DUAL_ASR = "dual"


def arbitrate_with_mode(
    mode: InjectionMode,
    candidates: CandidateSet,
    ctx: AcousticContext,
    scorer: Scorer | None = None,
    *,
    engine_id: str | None = None,
    fallback_on_scorer_error: bool = True,
) -> ArbitrationOutcome:
    """Arbitration behavior selector across the three injection strategies.

    NONE always bypasses. SINGLE_ASR takes the named engine's text
    unconditionally, no scoring. DUAL_ASR runs full arbitration; on scorer
    failure the default policy degrades to the first-configured engine's text
    rather than aborting (serving context: degraded-but-available), logged as
    such and flagged on the outcome.
    """
    if mode is InjectionMode.NONE:
        return ArbitrationOutcome.pure_audio_bypass()
    if mode is InjectionMode.SINGLE_ASR:
        if not engine_id:
            raise ValueError("single-engine injection requires an engine_id")
        candidate = candidates.by_engine(engine_id)
        if candidate is None:
            raise ValueError(
                f"clip {candidates.clip_id}: unknown engine {engine_id!r}; "
                f"have {[c.engine_id for c in candidates.candidates]}"
            )
        return ArbitrationOutcome.selection(
            ScoredCandidate.unscored(candidate.engine_id, candidate.raw_text)
        )
    if scorer is None:
        raise ValueError("dual-engine arbitration requires a scorer")
    try:
        return arbitrate(candidates, ctx, scorer)
    except ArbitrationError:
        if not fallback_on_scorer_error:
            raise
        first = candidates.candidates[0]
        logger.warning(
            "clip %s: scorer failed, degrading to first-configured engine %s",
            candidates.clip_id,
            first.engine_id,
        )
        return ArbitrationOutcome.selection(
            ScoredCandidate.unscored(first.engine_id, first.raw_text),
            degraded=True,
        )
