"""Flatten curated manifests into training-ready SFT records.

One export record per instruction pair of every eligible curation record
(accepted or revised critique; pruned and rejected clips emit nothing). The
ground transcript comes from a designated engine's raw text, or from an
arbitration pass when the source is "arbitrated"; soundmark-bypass clips
carry an empty ground transcript either way. No tokenization or training
happens here: the output is data for a downstream trainer.
"""

from __future__ import annotations

import logging
from typing import Iterable, Iterator

from .arbiter import AcousticContext, Scorer, arbitrate
from .core import CritiqueState, CurationRecord, Route, SftRecord

logger = logging.getLogger(__name__)

ARBITRATED = "arbitrated"


class ExportError(Exception):
    """A record could not be exported; carries the clip id."""

    def __init__(self, message: str, *, clip_id: str = ""):
        super().__init__(message)
        self.clip_id = clip_id


def _ground_transcript(record: CurationRecord, ground_source: str, scorer: Scorer | None) -> str:
    if record.route is not None and record.route.kind is Route.BYPASS_SOUNDMARK:
        return ""
    if record.candidates is None:
        raise ExportError(
            f"clip {record.clip_id}: no candidate set to take a ground transcript from",
            clip_id=record.clip_id,
        )
    if ground_source == ARBITRATED:
        if scorer is None:
            raise ValueError("arbitrated ground transcripts require a scorer")
        ctx = AcousticContext(clip_uri=record.clip.uri, context_token=record.clip.uri)
        outcome = arbitrate(record.candidates, ctx, scorer)
        return "" if outcome.is_bypass else outcome.selected.text
    candidate = record.candidates.by_engine(ground_source)
    if candidate is None:
        raise ExportError(
            f"clip {record.clip_id}: engine {ground_source!r} missing from candidate set "
            f"{[c.engine_id for c in record.candidates.candidates]}",
            clip_id=record.clip_id,
        )
    return candidate.raw_text


def sft_records_for(
    record: CurationRecord, ground_source: str, scorer: Scorer | None = None
) -> list[SftRecord]:
    """Export records for one curation record, in pair order; [] if ineligible."""
    if not record.pairs:
        return []
    if record.route is not None and record.route.kind is Route.PRUNED:
        return []
    if record.critique.state not in (CritiqueState.ACCEPTED, CritiqueState.REVISED):
        return []
    ground = _ground_transcript(record, ground_source, scorer)
    return [
        SftRecord(
            instruction=pair.instruction,
            target_response=pair.response,
            ground_transcript=ground,
            clip_uri=record.clip.uri,
        )
        for pair in record.pairs
    ]


def export_sft(
    records: Iterable[CurationRecord],
    ground_source: str,
    scorer: Scorer | None = None,
) -> Iterator[SftRecord]:
    """Export every eligible record, stable-ordered by (clip_id, pair index).

    Records are materialized to sort; per-record export errors propagate to
    the caller, which decides whether to skip or abort.
    """
    for record in sorted(records, key=lambda r: r.clip_id):
        yield from sft_records_for(record, ground_source, scorer)
