"""Corpus accounting: label distributions, duration totals, threshold sweeps.

Percentages are computed over label *assignments*, not clips: a record with
k labels contributes k assignments, so the multi-label denominators line up
with how occupancy is usually reported for such corpora. Rounding is
half-up, one decimal for percentages and two for hours, matching display
precision; retention fractions stay unrounded.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

from .core import CandidateSet, CurationRecord, LabelTag, Route
from .similarity import consistency_score

PLOT_KINDS = ("labels", "scaling", "sweep")


def round_half_up(value: float, places: int) -> float:
    quantum = Decimal(1).scaleb(-places)
    return float(Decimal(str(value)).quantize(quantum, rounding=ROUND_HALF_UP))


@dataclass(frozen=True, slots=True)
class DistributionReport:
    """Per-label occurrence percentages plus corpus-level totals."""

    percentages: dict[LabelTag, float]
    total_assignments: int
    total_clips: int
    total_hours: float
    retention: float


@dataclass(frozen=True, slots=True)
class CorpusAccounting:
    clips: int
    validated: int
    pruned: int
    hours: float
    retention: float

    @classmethod
    def from_counts(cls, clips: int, validated: int, pruned: int, hours: float) -> "CorpusAccounting":
        return cls(
            clips=clips,
            validated=validated,
            pruned=pruned,
            hours=hours,
            retention=validated / clips if clips else 0.0,
        )

    def to_dict(self) -> dict:
        return {
            "clips": self.clips,
            "validated": self.validated,
            "pruned": self.pruned,
            "hours": self.hours,
            "retention": round_half_up(self.retention, 4),
        }


def _scan(records: Iterable[CurationRecord]):
    label_counts = {tag: 0 for tag in LabelTag}
    clips = validated = pruned = 0
    total_seconds = 0.0
    for record in records:
        clips += 1
        if record.clip.duration_seconds < 0:
            raise ValueError(f"clip {record.clip_id}: negative duration")
        total_seconds += record.clip.duration_seconds
        if record.route is not None:
            if record.route.kind is Route.PRUNED:
                pruned += 1
            else:
                validated += 1
        for tag in record.labels:
            label_counts[tag] += 1
    return label_counts, clips, validated, pruned, total_seconds


def label_distribution(records: Iterable[CurationRecord]) -> DistributionReport:
    """Label-occurrence percentages over assignments, one decimal, half-up."""
    label_counts, clips, validated, _, total_seconds = _scan(records)
    total_assignments = sum(label_counts.values())
    if total_assignments == 0:
        raise ValueError("no label assignments in the manifest")
    percentages = {
        tag: round_half_up(100.0 * count / total_assignments, 1)
        for tag, count in label_counts.items()
    }
    return DistributionReport(
        percentages=percentages,
        total_assignments=total_assignments,
        total_clips=clips,
        total_hours=round_half_up(total_seconds / 3600.0, 2),
        retention=validated / clips if clips else 0.0,
    )


def corpus_accounting(records: Iterable[CurationRecord]) -> CorpusAccounting:
    """Clip, validated, and pruned counts plus total hours and retention."""
    _, clips, validated, pruned, total_seconds = _scan(records)
    return CorpusAccounting.from_counts(
        clips=clips,
        validated=validated,
        pruned=pruned,
        hours=round_half_up(total_seconds / 3600.0, 2),
    )


@dataclass(frozen=True, slots=True)
class SweepPoint:
    tau: float
    bypass: int
    passed: int
    pruned: int


def tau_sweep(
    pairs: Iterable[CandidateSet],
    taus: Sequence[float],
    *,
    boundary_inclusive: bool = True,
) -> list[SweepPoint]:
    """Routing counts at each threshold; pass counts are non-increasing in tau.

    Threshold recalibration tool: consistency scores are computed once per
    pair and reused across the whole sweep.
    """
    if list(taus) != sorted(taus):
        raise ValueError("taus must be sorted ascending")
    for tau in taus:
        if not (0.0 <= tau <= 1.0):
            raise ValueError(f"tau must be within [0, 1], got {tau}")
    scores: list[float | None] = []  # None marks a both-empty (bypass) pair
    for pair in pairs:
        if len(pair.candidates) != 2:
            raise ValueError(
                f"clip {pair.clip_id}: sweep requires 2 candidates, got {len(pair.candidates)}"
            )
        a = pair.candidates[0].normalized_text
        b = pair.candidates[1].normalized_text
        scores.append(None if not a and not b else consistency_score(a, b))
    points = []
    bypass = sum(1 for s in scores if s is None)
    for tau in taus:
        if boundary_inclusive:
            passed = sum(1 for s in scores if s is not None and s >= tau)
        else:
            passed = sum(1 for s in scores if s is not None and s > tau)
        points.append(
            SweepPoint(tau=tau, bypass=bypass, passed=passed, pruned=len(scores) - bypass - passed)
        )
    return points


def emit_plot_data(report, kind: str, destination: Path | str) -> Path:
    """Write a plot-data CSV with a header row.

    kind "labels" takes a DistributionReport (rows in descending percentage
    order), "scaling" a sequence of (scale_k, accuracy) pairs entered from
    run logs (pass-through formatting; accuracies are external results, not
    computed here), "sweep" a list of SweepPoints.
    """
    destination = Path(destination)
    with open(destination, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        if kind == "labels":
            writer.writerow(["label", "percent"])
            ordered = sorted(
                report.percentages.items(), key=lambda item: (-item[1], item[0].value)
            )
            for tag, percent in ordered:
                writer.writerow([tag.value, f"{percent:.1f}"])
        elif kind == "scaling":
            writer.writerow(["scale_k", "accuracy"])
            for scale_k, accuracy in report:
                writer.writerow([scale_k, accuracy])
        elif kind == "sweep":
            writer.writerow(["tau", "bypass", "pass", "pruned"])
            for point in report:
                writer.writerow([point.tau, point.bypass, point.passed, point.pruned])
        else:
            raise ValueError(f"kind must be one of {PLOT_KINDS}, got {kind!r}")
    return destination
