from __future__ import annotations

import pytest

from curasr.core import (
    AudioClipRef,
    Candidate,
    CandidateSet,
    CurationRecord,
    LabelTag,
    RouteDecision,
)
from curasr.stats import (
    CorpusAccounting,
    corpus_accounting,
    emit_plot_data,
    label_distribution,
    round_half_up,
    tau_sweep,
)

# Label-assignment proportions per 1,000 assignments used by the corpus-level
# distribution fixture (single-label records make assignments == records).
PROPORTIONS = {
    LabelTag.CONVERSATION: 464,
    LabelTag.ENTERTAINMENT: 171,
    LabelTag.EDUCATION: 165,
    LabelTag.MUSIC: 124,
    LabelTag.OTHERS: 27,
    LabelTag.ANNOUNCEMENT: 20,
    LabelTag.MEDIA: 14,
    LabelTag.EMERGENCY: 8,
    LabelTag.CULTURAL: 7,
}

EXPECTED_PERCENTAGES = {
    LabelTag.CONVERSATION: 46.4,
    LabelTag.ENTERTAINMENT: 17.1,
    LabelTag.EDUCATION: 16.5,
    LabelTag.MUSIC: 12.4,
    LabelTag.OTHERS: 2.7,
    LabelTag.ANNOUNCEMENT: 2.0,
    LabelTag.MEDIA: 1.4,
    LabelTag.EMERGENCY: 0.8,
    LabelTag.CULTURAL: 0.7,
}


def record(clip_id, labels=frozenset(), duration=360.0, route_decision=None):
    return CurationRecord(
        clip=AudioClipRef(clip_id, f"mock://clips/{clip_id}.wav", duration, "stats"),
        candidates=None,
        route=route_decision,
        labels=frozenset(labels),
    )


def proportion_records():
    records = []
    index = 0
    for tag, count in PROPORTIONS.items():
        for _ in range(count):
            records.append(record(f"clip-{index:05d}", {tag}))
            index += 1
    return records


class TestRounding:
    def test_half_up_not_bankers(self):
        assert round_half_up(0.15, 1) == 0.2
        assert round_half_up(0.25, 1) == 0.3  # round() would give 0.2
        assert round_half_up(11.111, 1) == 11.1
        assert round_half_up(3536.775, 2) == 3536.78


class TestLabelDistribution:
    def test_corpus_proportions(self):
        report = label_distribution(proportion_records())
        assert report.total_assignments == 1000
        assert report.total_clips == 1000
        assert report.percentages == EXPECTED_PERCENTAGES

    def test_single_record_single_label(self):
        report = label_distribution([record("c1", {LabelTag.MUSIC})])
        assert report.percentages[LabelTag.MUSIC] == 100.0
        assert report.total_assignments == 1

    def test_uniform_nine_way(self):
        records = []
        index = 0
        for tag in LabelTag:
            for _ in range(1000):
                records.append(record(f"c{index:05d}", {tag}))
                index += 1
        report = label_distribution(records)
        assert all(pct == 11.1 for pct in report.percentages.values())
        assert abs(sum(report.percentages.values()) - 100.0) <= 0.1 + 1e-9

    def test_multi_label_denominator_counts_assignments(self):
        records = [
            record("c1", {LabelTag.CONVERSATION, LabelTag.MUSIC}),
            record("c2", {LabelTag.CONVERSATION}),
        ]
        report = label_distribution(records)
        assert report.total_assignments == 3
        assert report.total_clips == 2
        assert report.percentages[LabelTag.CONVERSATION] == 66.7
        assert report.percentages[LabelTag.MUSIC] == 33.3

    def test_rounded_percentages_sum_near_100(self):
        report = label_distribution(proportion_records())
        assert abs(sum(report.percentages.values()) - 100.0) <= 0.1 + 1e-9

    def test_zero_assignments_rejected(self):
        with pytest.raises(ValueError, match="no label assignments"):
            label_distribution([record("c1")])


class TestCorpusAccounting:
    def test_ten_clips_of_360s_is_one_hour(self):
        accounting = corpus_accounting([record(f"c{i}", duration=360.0) for i in range(10)])
        assert accounting.hours == 1.00
        assert accounting.clips == 10

    def test_empty_manifest(self):
        accounting = corpus_accounting([])
        assert (accounting.clips, accounting.validated, accounting.pruned) == (0, 0, 0)
        assert accounting.hours == 0.0
        assert accounting.retention == 0.0

    def test_reported_operating_point_retention(self):
        accounting = CorpusAccounting.from_counts(
            clips=522_572, validated=456_832, pruned=65_740, hours=3536.78
        )
        assert abs(accounting.retention - 0.8742) <= 0.0001

    def test_scan_counts_routes(self):
        records = [
            record("c1", route_decision=RouteDecision.passed(0.8)),
            record("c2", route_decision=RouteDecision.bypass_soundmark()),
            record("c3", route_decision=RouteDecision.pruned(0.2)),
            record("c4"),
        ]
        accounting = corpus_accounting(records)
        assert accounting.clips == 4
        assert accounting.validated == 2
        assert accounting.pruned == 1
        assert accounting.retention == 0.5


def sweep_pair(clip_id, a, b):
    return CandidateSet(clip_id, (Candidate("alpha", a, a), Candidate("beta", b, b)))


class TestTauSweep:
    def test_fixed_score_flips_between_thresholds(self):
        # distance 1 over 4 code points: S = 0.75 for every pair
        pairs = [sweep_pair(f"c{i}", "abcd", "abce") for i in range(10)]
        points = tau_sweep(pairs, [0.6, 0.8])
        assert points[0].passed == 10 and points[0].pruned == 0
        assert points[1].passed == 0 and points[1].pruned == 10

    def test_tau_zero_prunes_nothing(self):
        pairs = [sweep_pair("c1", "abcd", "wxyz"), sweep_pair("c2", "abcd", "")]
        points = tau_sweep(pairs, [0.0])
        assert points[0].pruned == 0
        assert points[0].passed == 2

    def test_tau_one_inclusive_passes_only_exact_matches(self):
        pairs = [sweep_pair("c1", "same", "same"), sweep_pair("c2", "abcd", "abce")]
        points = tau_sweep(pairs, [1.0])
        assert points[0].passed == 1 and points[0].pruned == 1

    def test_bypass_counted_separately_and_constant(self):
        pairs = [sweep_pair("c1", "", ""), sweep_pair("c2", "abcd", "abce")]
        points = tau_sweep(pairs, [0.0, 0.5, 1.0])
        assert all(p.bypass == 1 for p in points)

    def test_pass_counts_non_increasing(self):
        pairs = [
            sweep_pair("c1", "abcd", "abcd"),
            sweep_pair("c2", "abcd", "abce"),
            sweep_pair("c3", "abcd", "axye"),
            sweep_pair("c4", "abcd", ""),
        ]
        points = tau_sweep(pairs, [i / 10 for i in range(11)])
        passes = [p.passed for p in points]
        assert passes == sorted(passes, reverse=True)

    def test_unsorted_taus_rejected(self):
        with pytest.raises(ValueError, match="sorted"):
            tau_sweep([], [0.5, 0.2])

    def test_out_of_range_tau_rejected(self):
        with pytest.raises(ValueError, match="within"):
            tau_sweep([], [0.5, 1.2])


class TestEmitPlotData:
    def test_labels_nine_rows_descending(self, tmp_path):
        report = label_distribution(proportion_records())
        path = emit_plot_data(report, "labels", tmp_path / "labels.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "label,percent"
        assert len(lines) == 10
        assert lines[1] == "Conversation,46.4"
        assert lines[-1] == "Cultural,0.7"
        percents = [float(line.split(",")[1]) for line in lines[1:]]
        assert percents == sorted(percents, reverse=True)

    def test_scaling_pass_through(self, tmp_path):
        data = [(5, 44.6), (50, 44.8), (200, 45.2), (580, 49.1)]
        path = emit_plot_data(data, "scaling", tmp_path / "scaling.csv")
        lines = path.read_text().splitlines()
        assert lines == [
            "scale_k,accuracy",
            "5,44.6",
            "50,44.8",
            "200,45.2",
            "580,49.1",
        ]

    def test_sweep_format(self, tmp_path):
        pairs = [sweep_pair("c1", "abcd", "abce")]
        points = tau_sweep(pairs, [0.6, 0.8])
        path = emit_plot_data(points, "sweep", tmp_path / "sweep.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "tau,bypass,pass,pruned"
        assert lines[1] == "0.6,0,1,0"
        assert lines[2] == "0.8,0,0,1"

    def test_empty_report_header_only(self, tmp_path):
        path = emit_plot_data([], "scaling", tmp_path / "empty.csv")
        assert path.read_text().splitlines() == ["scale_k,accuracy"]

    def test_unknown_kind_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="kind"):
            emit_plot_data([], "pie", tmp_path / "x.csv")
