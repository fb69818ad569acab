"""Domain records and the line-delimited manifest format.

Every pipeline stage reads and writes the same manifest: UTF-8, one JSON
object per line, keys in a fixed documented order so manifests diff cleanly
between runs. Records are immutable after construction and validate their
own invariants, so a record that exists is a record that is well-formed.

Manifest record keys, in serialization order:
    clip_id, uri, duration_seconds, source_tag, candidates, route, score,
    caption, critique_status, labels, pairs

SFT export record keys:
    instruction, target_response, ground_transcript, clip_uri
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

logger = logging.getLogger(__name__)

MANIFEST_KEYS = (
    "clip_id",
    "uri",
    "duration_seconds",
    "source_tag",
    "candidates",
    "route",
    "score",
    "caption",
    "critique_status",
    "labels",
    "pairs",
)

SFT_KEYS = ("instruction", "target_response", "ground_transcript", "clip_uri")


class InvariantViolation(ValueError):
    """A record breaks one of the documented record invariants."""


class ManifestError(Exception):
    """Manifest-level read or write failure."""


class ManifestLineError(ManifestError):
    """One manifest line could not be turned into a valid record."""

    def __init__(self, line_number: int, reason: str):
        super().__init__(f"line {line_number}: {reason}")
        self.line_number = line_number
        self.reason = reason


def utc_timestamp(moment: datetime | None = None) -> str:
    """UTC RFC 3339 timestamp string, second precision."""
    dt = moment or datetime.now(timezone.utc)
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _check_timestamp(value: str, owner: str) -> None:
    try:
        datetime.fromisoformat(value.replace("Z", "+00:00"))
    except ValueError:
        raise InvariantViolation(f"{owner}: timestamp {value!r} is not RFC 3339") from None


class LabelTag(str, Enum):
    """Closed set of socio-functional labels; records may carry several."""

    CONVERSATION = "Conversation"
    ENTERTAINMENT = "Entertainment"
    EDUCATION = "Education"
    MUSIC = "Music"
    OTHERS = "Others"
    ANNOUNCEMENT = "Announcement"
    MEDIA = "Media"
    EMERGENCY = "Emergency"
    CULTURAL = "Cultural"


class Route(str, Enum):
    BYPASS_SOUNDMARK = "bypass_soundmark"
    PASS = "pass"
    PRUNED = "pruned"


class CritiqueState(str, Enum):
    NOT_RUN = "not_run"
    ACCEPTED = "accepted"
    REVISED = "revised"
    REJECTED = "rejected"


@dataclass(frozen=True, slots=True)
class AudioClipRef:
    """Identity, location, and duration of one raw audio clip."""

    clip_id: str
    uri: str
    duration_seconds: float
    source_tag: str = ""

    def __post_init__(self) -> None:
        if not self.clip_id:
            raise InvariantViolation("clip_id must be non-empty")
        if not math.isfinite(self.duration_seconds) or self.duration_seconds < 0:
            raise InvariantViolation(
                f"clip {self.clip_id}: duration_seconds must be finite and >= 0, "
                f"got {self.duration_seconds}"
            )


@dataclass(frozen=True, slots=True)
class Candidate:
    """One engine's transcription of a clip, raw and normalized."""

    engine_id: str
    raw_text: str
    normalized_text: str

    def __post_init__(self) -> None:
        if not self.engine_id:
            raise InvariantViolation("candidate engine_id must be non-empty")


@dataclass(frozen=True, slots=True)
class CandidateSet:
    """Per-engine transcriptions for one clip, in configured engine order."""

    clip_id: str
    candidates: tuple[Candidate, ...]

    def __post_init__(self) -> None:
        if not self.clip_id:
            raise InvariantViolation("candidate set clip_id must be non-empty")
        if not self.candidates:
            raise InvariantViolation(f"clip {self.clip_id}: candidate set must not be empty")
        engine_ids = [c.engine_id for c in self.candidates]
        if len(set(engine_ids)) != len(engine_ids):
            raise InvariantViolation(
                f"clip {self.clip_id}: duplicate engine ids in candidate set: {engine_ids}"
            )

    def by_engine(self, engine_id: str) -> Candidate | None:
        for candidate in self.candidates:
            if candidate.engine_id == engine_id:
                return candidate
        return None


@dataclass(frozen=True, slots=True)
class RouteDecision:
    """Verify outcome: soundmark bypass, pass with score, or pruned with score."""

    kind: Route
    score: float | None = None

    def __post_init__(self) -> None:
        if self.kind is Route.BYPASS_SOUNDMARK:
            if self.score is not None:
                raise InvariantViolation("bypass decision carries no score")
        else:
            if self.score is None:
                raise InvariantViolation(f"{self.kind.value} decision requires a score")
            if not (0.0 <= self.score <= 1.0):
                raise InvariantViolation(f"score must be within [0, 1], got {self.score}")

    @classmethod
    def bypass_soundmark(cls) -> "RouteDecision":
        return cls(Route.BYPASS_SOUNDMARK)

    @classmethod
    def passed(cls, score: float) -> "RouteDecision":
        return cls(Route.PASS, score)

    @classmethod
    def pruned(cls, score: float) -> "RouteDecision":
        return cls(Route.PRUNED, score)


@dataclass(frozen=True, slots=True)
class Critique:
    """Audit verdict for a generated caption.

    REVISED carries the replacement caption; REJECTED carries the reason.
    """

    state: CritiqueState = CritiqueState.NOT_RUN
    detail: str | None = None

    def __post_init__(self) -> None:
        if self.state in (CritiqueState.NOT_RUN, CritiqueState.ACCEPTED):
            if self.detail is not None:
                raise InvariantViolation(f"{self.state.value} critique carries no detail")
        elif self.detail is None:
            raise InvariantViolation(f"{self.state.value} critique requires a detail string")

    @classmethod
    def not_run(cls) -> "Critique":
        return cls(CritiqueState.NOT_RUN)

    @classmethod
    def accepted(cls) -> "Critique":
        return cls(CritiqueState.ACCEPTED)

    @classmethod
    def revised(cls, new_caption: str) -> "Critique":
        return cls(CritiqueState.REVISED, new_caption)

    @classmethod
    def rejected(cls, reason: str) -> "Critique":
        return cls(CritiqueState.REJECTED, reason)


@dataclass(frozen=True, slots=True)
class Provenance:
    teacher_endpoint_id: str
    prompt_template_id: str
    timestamp: str

    def __post_init__(self) -> None:
        if not self.teacher_endpoint_id or not self.prompt_template_id:
            raise InvariantViolation("provenance endpoint and template ids must be non-empty")
        _check_timestamp(self.timestamp, "provenance")


@dataclass(frozen=True, slots=True)
class InstructionPair:
    """One instruction/response training pair grounded in an audited caption."""

    instruction: str
    response: str
    clip_id: str
    provenance: Provenance

    def __post_init__(self) -> None:
        if not self.instruction or not self.response:
            raise InvariantViolation(
                f"clip {self.clip_id}: instruction and response must be non-empty"
            )
        if not self.clip_id:
            raise InvariantViolation("instruction pair clip_id must be non-empty")


@dataclass(frozen=True, slots=True)
class SftRecord:
    """Training-ready example: instruction, target response, ground transcript."""

    instruction: str
    target_response: str
    ground_transcript: str
    clip_uri: str

    def __post_init__(self) -> None:
        if not self.instruction or not self.target_response:
            raise InvariantViolation("sft record instruction and target_response must be non-empty")


@dataclass(frozen=True, slots=True)
class CurationRecord:
    """Full per-clip curation state carried between pipeline stages.

    Invariants enforced here:
      - pruned records never carry a caption or instruction pairs
      - records with pairs have an accepted or revised critique
      - candidate set and pairs reference this record's clip_id
    """

    clip: AudioClipRef
    candidates: CandidateSet | None = None
    route: RouteDecision | None = None
    caption: str | None = None
    critique: Critique = field(default_factory=Critique.not_run)
    labels: frozenset[LabelTag] = frozenset()
    pairs: tuple[InstructionPair, ...] = ()

    def __post_init__(self) -> None:
        if self.candidates is not None and self.candidates.clip_id != self.clip.clip_id:
            raise InvariantViolation(
                f"clip {self.clip.clip_id}: candidate set belongs to {self.candidates.clip_id}"
            )
        if self.route is not None and self.route.kind is Route.PRUNED:
            if self.caption is not None or self.pairs:
                raise InvariantViolation(
                    f"clip {self.clip.clip_id}: pruned records never carry captions or pairs"
                )
        if self.pairs and self.critique.state not in (
            CritiqueState.ACCEPTED,
            CritiqueState.REVISED,
        ):
            raise InvariantViolation(
                f"clip {self.clip.clip_id}: records with pairs require an accepted "
                f"or revised critique, got {self.critique.state.value}"
            )
        for pair in self.pairs:
            if pair.clip_id != self.clip.clip_id:
                raise InvariantViolation(
                    f"clip {self.clip.clip_id}: pair references {pair.clip_id}"
                )

    @property
    def clip_id(self) -> str:
        return self.clip.clip_id


def _validate_record(record: CurationRecord) -> None:
    """Re-run construction invariants; guards writes against mutated records."""
    CurationRecord.__post_init__(record)
    AudioClipRef.__post_init__(record.clip)
    if record.candidates is not None:
        CandidateSet.__post_init__(record.candidates)
    if record.route is not None:
        RouteDecision.__post_init__(record.route)
    Critique.__post_init__(record.critique)
    for pair in record.pairs:
        InstructionPair.__post_init__(pair)
        Provenance.__post_init__(pair.provenance)


# --- serialization -----------------------------------------------------------


def record_to_dict(record: CurationRecord) -> dict:
    """Plain-dict form with keys in MANIFEST_KEYS order."""
    candidates = None
    if record.candidates is not None:
        candidates = [
            {
                "engine_id": c.engine_id,
                "raw_text": c.raw_text,
                "normalized_text": c.normalized_text,
            }
            for c in record.candidates.candidates
        ]
    return {
        "clip_id": record.clip.clip_id,
        "uri": record.clip.uri,
        "duration_seconds": record.clip.duration_seconds,
        "source_tag": record.clip.source_tag,
        "candidates": candidates,
        "route": record.route.kind.value if record.route else None,
        "score": record.route.score if record.route else None,
        "caption": record.caption,
        "critique_status": {
            "state": record.critique.state.value,
            "detail": record.critique.detail,
        },
        "labels": sorted(tag.value for tag in record.labels),
        "pairs": [
            {
                "instruction": p.instruction,
                "response": p.response,
                "provenance": {
                    "teacher_endpoint_id": p.provenance.teacher_endpoint_id,
                    "prompt_template_id": p.provenance.prompt_template_id,
                    "timestamp": p.provenance.timestamp,
                },
            }
            for p in record.pairs
        ],
    }


def record_to_json(record: CurationRecord) -> str:
    return json.dumps(record_to_dict(record), ensure_ascii=False, separators=(",", ":"))


def _expect(data: dict, key: str, types: tuple[type, ...], where: str):
    if key not in data:
        raise ValueError(f"{where}: missing key {key!r}")
    value = data[key]
    if isinstance(value, bool) and bool not in types:
        raise ValueError(f"{where}: key {key!r} has wrong type bool")
    if not isinstance(value, types):
        raise ValueError(f"{where}: key {key!r} has wrong type {type(value).__name__}")
    return value


def record_from_dict(data: dict) -> CurationRecord:
    """Inverse of record_to_dict; strict about key set and value types."""
    if not isinstance(data, dict):
        raise ValueError("record must be a JSON object")
    unknown = set(data) - set(MANIFEST_KEYS)
    if unknown:
        raise ValueError(f"unknown record keys: {sorted(unknown)}")
    clip_id = _expect(data, "clip_id", (str,), "record")
    where = f"clip {clip_id or '<empty>'}"
    clip = AudioClipRef(
        clip_id=clip_id,
        uri=_expect(data, "uri", (str,), where),
        duration_seconds=float(_expect(data, "duration_seconds", (int, float), where)),
        source_tag=_expect(data, "source_tag", (str,), where),
    )

    raw_candidates = _expect(data, "candidates", (list, type(None)), where)
    candidates = None
    if raw_candidates is not None:
        parsed = []
        for entry in raw_candidates:
            if not isinstance(entry, dict):
                raise ValueError(f"{where}: candidate entries must be objects")
            parsed.append(
                Candidate(
                    engine_id=_expect(entry, "engine_id", (str,), where),
                    raw_text=_expect(entry, "raw_text", (str,), where),
                    normalized_text=_expect(entry, "normalized_text", (str,), where),
                )
            )
        candidates = CandidateSet(clip_id=clip_id, candidates=tuple(parsed))

    raw_route = _expect(data, "route", (str, type(None)), where)
    raw_score = _expect(data, "score", (int, float, type(None)), where)
    if raw_route is None:
        if raw_score is not None:
            raise ValueError(f"{where}: score present without a route")
        route = None
    else:
        try:
            kind = Route(raw_route)
        except ValueError:
            raise ValueError(f"{where}: unknown route {raw_route!r}") from None
        route = RouteDecision(kind, None if raw_score is None else float(raw_score))

    raw_critique = _expect(data, "critique_status", (dict,), where)
    try:
        state = CritiqueState(_expect(raw_critique, "state", (str,), where))
    except ValueError:
        raise ValueError(f"{where}: unknown critique state {raw_critique.get('state')!r}") from None
    critique = Critique(state, _expect(raw_critique, "detail", (str, type(None)), where))

    raw_labels = _expect(data, "labels", (list,), where)
    labels = set()
    for raw_tag in raw_labels:
        try:
            labels.add(LabelTag(raw_tag))
        except ValueError:
            raise ValueError(f"{where}: unknown label {raw_tag!r}") from None

    raw_pairs = _expect(data, "pairs", (list,), where)
    pairs = []
    for entry in raw_pairs:
        if not isinstance(entry, dict):
            raise ValueError(f"{where}: pair entries must be objects")
        raw_prov = _expect(entry, "provenance", (dict,), where)
        pairs.append(
            InstructionPair(
                instruction=_expect(entry, "instruction", (str,), where),
                response=_expect(entry, "response", (str,), where),
                clip_id=clip_id,
                provenance=Provenance(
                    teacher_endpoint_id=_expect(raw_prov, "teacher_endpoint_id", (str,), where),
                    prompt_template_id=_expect(raw_prov, "prompt_template_id", (str,), where),
                    timestamp=_expect(raw_prov, "timestamp", (str,), where),
                ),
            )
        )

    return CurationRecord(
        clip=clip,
        candidates=candidates,
        route=route,
        caption=_expect(data, "caption", (str, type(None)), where),
        critique=critique,
        labels=frozenset(labels),
        pairs=tuple(pairs),
    )


def record_from_json(line: str) -> CurationRecord:
    return record_from_dict(json.loads(line))


# --- manifest I/O ------------------------------------------------------------


def write_manifest(records: Iterable[CurationRecord], destination: Path | str) -> int:
    """Write records one per line; atomic: the destination appears only complete.

    Content goes to `<destination>.partial` first and is renamed into place
    after the last record; any failure removes the partial file and re-raises.
    An invariant-violating record aborts the write, naming its clip_id.
    Writing is single-writer; returns the number of records written.
    """
    destination = Path(destination)
    partial = destination.with_name(destination.name + ".partial")
    count = 0
    seen: set[str] = set()
    try:
        with open(partial, "w", encoding="utf-8") as handle:
            for record in records:
                try:
                    _validate_record(record)
                except InvariantViolation as exc:
                    raise InvariantViolation(
                        f"record for clip {record.clip.clip_id!r} rejected: {exc}"
                    ) from exc
                if record.clip_id in seen:
                    raise InvariantViolation(
                        f"record for clip {record.clip_id!r} rejected: duplicate clip_id"
                    )
                seen.add(record.clip_id)
                handle.write(record_to_json(record))
                handle.write("\n")
                count += 1
        os.replace(partial, destination)
    except BaseException:
        partial.unlink(missing_ok=True)
        raise
    return count


def read_manifest(
    source: Path | str,
    *,
    on_malformed: str = "abort",
    diagnostics: list[ManifestLineError] | None = None,
) -> Iterator[CurationRecord]:
    """Yield records in file order.

    A line that fails to parse or violates record invariants raises
    ManifestLineError under the default "abort" policy; under "skip" it is
    logged, appended to `diagnostics` when provided, and reading continues.
    Duplicate clip_ids within one manifest are treated the same way.
    """
    if on_malformed not in ("abort", "skip"):
        raise ValueError(f"on_malformed must be 'abort' or 'skip', got {on_malformed!r}")
    source = Path(source)
    seen: set[str] = set()
    with open(source, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, 1):
            try:
                record = record_from_json(line)
                if record.clip_id in seen:
                    raise InvariantViolation(f"duplicate clip_id {record.clip_id!r}")
                seen.add(record.clip_id)
            except (json.JSONDecodeError, ValueError) as exc:
                error = ManifestLineError(line_number, str(exc))
                if on_malformed == "abort":
                    raise error from exc
                logger.warning("%s: skipping %s", source, error)
                if diagnostics is not None:
                    diagnostics.append(error)
                continue
            yield record


def sft_record_to_json(record: SftRecord) -> str:
    payload = {
        "instruction": record.instruction,
        "target_response": record.target_response,
        "ground_transcript": record.ground_transcript,
        "clip_uri": record.clip_uri,
    }
    return json.dumps(payload, ensure_ascii=False, separators=(",", ":"))


def write_sft_file(records: Iterable[SftRecord], destination: Path | str) -> int:
    """Write SFT export records as JSONL with the documented fixed key order."""
    destination = Path(destination)
    partial = destination.with_name(destination.name + ".partial")
    count = 0
    try:
        with open(partial, "w", encoding="utf-8") as handle:
            for record in records:
                handle.write(sft_record_to_json(record))
                handle.write("\n")
                count += 1
        os.replace(partial, destination)
    except BaseException:
        partial.unlink(missing_ok=True)
        raise
    return count
