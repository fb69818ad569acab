from __future__ import annotations

import json
import random

import pytest

from curasr.core import (
    AudioClipRef,
    Candidate,
    CandidateSet,
    Critique,
    CritiqueState,
    CurationRecord,
    Provenance,
    Route,
    RouteDecision,
    read_manifest,
    write_manifest,
)
from curasr.curation import (
    CRITIQUE_MARKER,
    DEFAULT_TEMPLATES,
    EXPAND_MARKER,
    CurationPipeline,
    PromptTemplates,
    RouterConfig,
    critique_caption,
    expand_instructions,
    generate_caption,
    parse_critique_verdict,
    parse_instruction_pairs,
    route,
)
from curasr.gateway import EngineConfig, Gateway, MalformedResponse
from curasr.similarity import normalize_text

from oracles import oracle_consistency
from synthcorpus import ENGINE_A, ENGINE_B, TEACHER, build_corpus

PROV = Provenance("teacher", "builtin-v1", "2026-01-01T00:00:00Z")


def pair(a: str, b: str, clip_id="clip-0001") -> CandidateSet:
    return CandidateSet(
        clip_id,
        (
            Candidate("alpha", a, normalize_text(a)),
            Candidate("beta", b, normalize_text(b)),
        ),
    )


def record_with(route_decision=None, caption=None, critique=None, pairs=(), clip_id="clip-0001"):
    return CurationRecord(
        clip=AudioClipRef(clip_id, f"mock://clips/{clip_id}.wav", 10.0, "unit"),
        candidates=pair("夜市傳來叫賣聲", "夜市傳來的叫賣聲", clip_id) if route_decision else None,
        route=route_decision,
        caption=caption,
        critique=critique or Critique.not_run(),
        pairs=pairs,
    )


class TestRoute:
    CFG = RouterConfig(tau=0.6)

    def test_both_empty_bypasses(self):
        decision = route(pair("", ""), self.CFG)
        assert decision.kind is Route.BYPASS_SOUNDMARK
        assert decision.score is None

    def test_agreeing_pair_passes(self):
        decision = route(pair("abcd", "abce"), self.CFG)
        assert decision.kind is Route.PASS
        assert decision.score == pytest.approx(0.75)

    def test_one_empty_prunes_at_any_positive_tau(self):
        decision = route(pair("abcd", ""), self.CFG)
        assert decision.kind is Route.PRUNED
        assert decision.score == 0.0

    def test_boundary_score_passes_when_inclusive(self):
        # "abcde" vs "abcxy": distance 2 over 5 code points -> exactly 0.6
        decision = route(pair("abcde", "abcxy"), self.CFG)
        assert decision.kind is Route.PASS
        assert decision.score == pytest.approx(0.6)

    def test_boundary_score_prunes_when_exclusive(self):
        cfg = RouterConfig(tau=0.6, boundary_inclusive=False)
        decision = route(pair("abcde", "abcxy"), cfg)
        assert decision.kind is Route.PRUNED

    def test_wrong_candidate_count_rejected(self):
        single = CandidateSet("c", (Candidate("alpha", "x", "x"),))
        with pytest.raises(ValueError, match="exactly 2"):
            route(single, self.CFG)

    def test_exhaustive_truth_table(self):
        texts = {"empty": "", "short": "abc", "long": "abcdefghij"}
        for name_a, a in texts.items():
            for name_b, b in texts.items():
                decision = route(pair(a, b), self.CFG)
                if not a and not b:
                    expected = Route.BYPASS_SOUNDMARK
                else:
                    score = oracle_consistency(a, b)
                    expected = Route.PASS if score >= 0.6 else Route.PRUNED
                assert decision.kind is expected, (name_a, name_b)

    def test_raising_tau_never_turns_pruned_into_pass(self):
        rng = random.Random(77)
        alphabet = "ab夜市"
        pairs = [
            pair(
                "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 8))),
                "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 8))),
                clip_id=f"clip-{i:03d}",
            )
            for i in range(60)
        ]
        taus = [i / 5 for i in range(6)]
        previous_pass: set[int] | None = None
        for tau in taus:
            cfg = RouterConfig(tau=tau)
            passing = {
                i for i, p in enumerate(pairs) if route(p, cfg).kind is Route.PASS
            }
            if previous_pass is not None:
                assert passing <= previous_pass  # monotone shrink, never Pruned->Pass
            previous_pass = passing

    def test_tau_validation(self):
        with pytest.raises(ValueError, match="tau"):
            RouterConfig(tau=1.5)


class TestVerdictParsing:
    def test_accept(self):
        assert parse_critique_verdict("ACCEPT") == Critique.accepted()
        assert parse_critique_verdict("  ACCEPT \n") == Critique.accepted()

    def test_revise(self):
        assert parse_critique_verdict("REVISE: drums only") == Critique.revised("drums only")

    def test_reject(self):
        verdict = parse_critique_verdict("REJECT: describes speaker emotion not audible")
        assert verdict.state is CritiqueState.REJECTED
        assert verdict.detail == "describes speaker emotion not audible"

    def test_unparseable(self):
        with pytest.raises(MalformedResponse, match="unparseable"):
            parse_critique_verdict("sounds good to me")

    def test_empty_revision_is_malformed(self):
        with pytest.raises(MalformedResponse, match="empty"):
            parse_critique_verdict("REVISE:   ")


class TestPairParsing:
    def test_two_pairs(self):
        text = "Q: what is heard?\nA: rain\nQ: where?\nA: on a roof"
        assert parse_instruction_pairs(text) == [
            ("what is heard?", "rain"),
            ("where?", "on a roof"),
        ]

    def test_junk_between_pairs_ignored(self):
        text = "intro\nQ: q1\nnote\nA: a1\ntrailer"
        assert parse_instruction_pairs(text) == [("q1", "a1")]

    def test_incomplete_and_empty_dropped(self):
        assert parse_instruction_pairs("Q: alone") == []
        assert parse_instruction_pairs("Q: q\nA:   ") == []
        assert parse_instruction_pairs("A: orphan answer") == []

    def test_no_pairs(self):
        assert parse_instruction_pairs("nothing structured") == []


class TestTemplates:
    def test_generate_template_must_not_carry_transcription_slot(self):
        with pytest.raises(ValueError, match="transcription slot"):
            PromptTemplates(generate_template="describe {audio} given {caption}")

    def test_generate_template_requires_audio_slot(self):
        with pytest.raises(ValueError, match="audio"):
            PromptTemplates(generate_template="describe the sound")

    def test_unknown_slot_rejected(self):
        with pytest.raises(ValueError, match="invalid slot"):
            PromptTemplates(critique_template="check {audio} {capton}")

    def test_defaults_valid(self):
        assert DEFAULT_TEMPLATES.template_id == "builtin-v1"
        assert CRITIQUE_MARKER in DEFAULT_TEMPLATES.critique_template
        assert EXPAND_MARKER in DEFAULT_TEMPLATES.expand_template


class TestStageFunctions:
    def test_generate_caption_stores_teacher_text(self):
        record = record_with(RouteDecision.passed(0.9))
        caption = generate_caption(
            record, DEFAULT_TEMPLATES, lambda prompt, uri: "night-market vendor calls"
        )
        assert caption == "night-market vendor calls"

    def test_generate_prompt_contains_uri_not_candidates(self):
        record = record_with(RouteDecision.passed(0.9))
        prompts = []

        def teacher(prompt, uri):
            prompts.append(prompt)
            return "ok"

        generate_caption(record, DEFAULT_TEMPLATES, teacher)
        assert record.clip.uri in prompts[0]
        for candidate in record.candidates.candidates:
            assert candidate.raw_text not in prompts[0]

    def test_generate_rejects_pruned(self):
        record = record_with(RouteDecision.pruned(0.1))
        with pytest.raises(ValueError, match="pass or"):
            generate_caption(record, DEFAULT_TEMPLATES, lambda p, u: "x")

    def test_generate_rejects_unrouted(self):
        record = record_with()
        with pytest.raises(ValueError):
            generate_caption(record, DEFAULT_TEMPLATES, lambda p, u: "x")

    def test_critique_requires_caption(self):
        record = record_with(RouteDecision.passed(0.9))
        with pytest.raises(ValueError, match="caption"):
            critique_caption(record, DEFAULT_TEMPLATES, lambda p, u: "ACCEPT")

    def test_critique_parses_teacher_verdict(self):
        record = record_with(RouteDecision.passed(0.9), caption="drums and rain")
        verdict = critique_caption(record, DEFAULT_TEMPLATES, lambda p, u: "REVISE: drums only")
        assert verdict == Critique.revised("drums only")

    def test_expand_builds_pairs_with_provenance(self):
        record = record_with(
            RouteDecision.passed(0.9), caption="drums", critique=Critique.accepted()
        )
        pairs = expand_instructions(
            record,
            DEFAULT_TEMPLATES,
            lambda p, u: "Q: what plays?\nA: drums\nQ: tempo?\nA: steady",
            max_pairs=4,
            provenance=PROV,
        )
        assert [p.instruction for p in pairs] == ["what plays?", "tempo?"]
        assert all(p.provenance == PROV and p.clip_id == "clip-0001" for p in pairs)

    def test_expand_caps_at_max_pairs(self):
        record = record_with(
            RouteDecision.passed(0.9), caption="drums", critique=Critique.accepted()
        )
        many = "\n".join(f"Q: q{i}?\nA: a{i}" for i in range(10))
        pairs = expand_instructions(
            record, DEFAULT_TEMPLATES, lambda p, u: many, max_pairs=4, provenance=PROV
        )
        assert len(pairs) == 4

    def test_expand_zero_pairs_is_empty_not_error(self, caplog):
        record = record_with(
            RouteDecision.passed(0.9), caption="drums", critique=Critique.accepted()
        )
        pairs = expand_instructions(
            record, DEFAULT_TEMPLATES, lambda p, u: "no structure", max_pairs=4, provenance=PROV
        )
        assert pairs == ()

    def test_expand_rejects_unaudited_record(self):
        record = record_with(RouteDecision.passed(0.9), caption="drums")
        with pytest.raises(ValueError, match="accepted or revised"):
            expand_instructions(
                record, DEFAULT_TEMPLATES, lambda p, u: "", max_pairs=4, provenance=PROV
            )


def make_pipeline(server, gateway, *, workers=8, corpus_seed=7, **kwargs):
    def endpoint(name):
        return EngineConfig(name, server.endpoint_url(name), 5000, 2, 20)

    return CurationPipeline(
        gateway,
        [endpoint(ENGINE_A), endpoint(ENGINE_B)],
        endpoint(TEACHER),
        RouterConfig(tau=0.6),
        DEFAULT_TEMPLATES,
        workers=workers,
        run_timestamp="2026-01-01T00:00:00Z",
        **kwargs,
    )


class TestPipeline:
    def test_small_corpus_counts_and_invariants(self, serve, tmp_path):
        corpus = build_corpus(5, 20, 10, seed=3)
        corpus.fixture["record_requests"] = True
        server = serve(corpus.fixture)
        manifest_in = tmp_path / "in.jsonl"
        write_manifest(corpus.records, manifest_in)
        manifest_out = tmp_path / "out.jsonl"
        with Gateway() as gateway:
            pipeline = make_pipeline(server, gateway)
            report = pipeline.run(manifest_in, manifest_out)

        assert (report.raw, report.bypass, report.passed, report.pruned, report.errored) == (
            35, 5, 20, 10, 0,
        )
        records = list(read_manifest(manifest_out))
        assert [r.clip_id for r in records] == sorted(r.clip_id for r in records)
        assert len(records) == 35
        for record in records:
            if record.route.kind is Route.PRUNED:
                assert record.caption is None and record.pairs == ()
                assert record.critique.state is CritiqueState.NOT_RUN
            elif record.critique.state in (CritiqueState.ACCEPTED, CritiqueState.REVISED):
                assert record.caption is not None
            elif record.critique.state is CritiqueState.REJECTED:
                assert record.caption is None and record.pairs == ()

        # Generate-stage payloads never contain any candidate transcription.
        candidate_texts = {
            c.raw_text
            for r in records
            if r.candidates
            for c in r.candidates.candidates
            if c.raw_text
        }
        describe_payloads = [
            payload for path, payload in server.requests() if path.endswith("/describe")
        ]
        assert describe_payloads, "teacher was called"
        for payload in describe_payloads:
            prompt = payload["prompt"]
            if CRITIQUE_MARKER not in prompt and EXPAND_MARKER not in prompt:
                for text in candidate_texts:
                    assert text not in prompt

        # No checkpoint droppings after a successful run.
        leftovers = [p.name for p in tmp_path.iterdir() if ".stage" in p.name]
        assert leftovers == []

    def test_rerun_on_own_output_is_noop_with_no_calls(self, serve, tmp_path):
        corpus = build_corpus(3, 12, 5, seed=5)
        server = serve(corpus.fixture)
        manifest_in = tmp_path / "in.jsonl"
        write_manifest(corpus.records, manifest_in)
        first_out = tmp_path / "out1.jsonl"
        second_out = tmp_path / "out2.jsonl"
        with Gateway() as gateway:
            pipeline = make_pipeline(server, gateway)
            pipeline.run(manifest_in, first_out)
            server.reset_hits()
            report = pipeline.run(first_out, second_out)
        assert server.hits() == {}  # nothing re-bought
        assert second_out.read_bytes() == first_out.read_bytes()
        assert report.errored == 0

    def test_interrupted_run_resumes_to_identical_output(self, serve, tmp_path):
        corpus = build_corpus(4, 16, 6, seed=9)
        server = serve(corpus.fixture)
        manifest_in = tmp_path / "in.jsonl"
        write_manifest(corpus.records, manifest_in)

        baseline_out = tmp_path / "baseline.jsonl"
        with Gateway() as gateway:
            make_pipeline(server, gateway).run(manifest_in, baseline_out)

        # Interrupt a second run partway through the generate stage.
        resumed_out = tmp_path / "resumed.jsonl"
        with Gateway() as gateway:
            pipeline = make_pipeline(server, gateway, workers=2)
            calls = {"n": 0}
            original = gateway.teacher_call

            def flaky(prompt, uri, endpoint):
                calls["n"] += 1
                if calls["n"] > 5:
                    raise KeyboardInterrupt
                return original(prompt, uri, endpoint)

            gateway.teacher_call = flaky
            with pytest.raises(KeyboardInterrupt):
                pipeline.run(manifest_in, resumed_out)

        assert not resumed_out.exists()
        assert resumed_out.with_name(resumed_out.name + ".stage-verify").exists()

        server.reset_hits()
        with Gateway() as gateway:
            report = make_pipeline(server, gateway).run(manifest_in, resumed_out)
        assert report.errored == 0
        # Resume starts after verify: no transcription was re-bought.
        assert not any("/transcribe/" in key for key in server.hits())
        assert resumed_out.read_bytes() == baseline_out.read_bytes()

    def test_resume_ignored_when_config_differs(self, serve, tmp_path):
        corpus = build_corpus(2, 6, 2, seed=13)
        server = serve(corpus.fixture)
        manifest_in = tmp_path / "in.jsonl"
        write_manifest(corpus.records, manifest_in)
        out = tmp_path / "out.jsonl"
        with Gateway() as gateway:
            pipeline = make_pipeline(server, gateway)
            pipeline._write_checkpoint(out, "verify", ["verify"], corpus.records)
            other = make_pipeline(server, gateway, max_pairs_per_clip=2)
            assert other._load_resume_state(out) is None
            assert pipeline._load_resume_state(out) is not None

    def test_per_clip_errors_isolated(self, serve, tmp_path):
        corpus = build_corpus(2, 10, 4, seed=21, fault_every=4)
        server = serve(corpus.fixture)
        manifest_in = tmp_path / "in.jsonl"
        write_manifest(corpus.records, manifest_in)
        out = tmp_path / "out.jsonl"
        with Gateway() as gateway:
            pipeline = make_pipeline(server, gateway)
            report = pipeline.run(manifest_in, out)
        assert report.errored == len(corpus.fault_clips)
        assert list(report.errored_clips) == sorted(corpus.fault_clips)
        assert report.raw == report.bypass + report.passed + report.pruned + report.errored
        records = {r.clip_id: r for r in read_manifest(out)}
        assert len(records) == 16
        for clip_id in corpus.fault_clips:
            assert records[clip_id].route is None  # left unprocessed, not half-filled

    def test_verify_only_routes_without_teacher(self, serve, tmp_path):
        corpus = build_corpus(2, 8, 3, seed=31)
        server = serve(corpus.fixture)
        manifest_in = tmp_path / "in.jsonl"
        write_manifest(corpus.records, manifest_in)
        out = tmp_path / "out.jsonl"
        with Gateway() as gateway:
            report = make_pipeline(server, gateway).verify_only(manifest_in, out)
        assert (report.bypass, report.passed, report.pruned) == (2, 8, 3)
        for record in read_manifest(out):
            assert record.route is not None
            assert record.caption is None and record.pairs == ()
        assert not any("/describe/" in key for key in server.hits())
