"""The verify-generate-critique curation stages and their checkpointed pipeline.

Stage order per clip:
    verify    dual-engine transcription, consistency routing (bypass both-empty
              soundmarks, pass agreeing pairs, prune disagreeing ones)
    generate  caption from the teacher, prompted on audio only (the prompt
              never contains ASR text)
    critique  teacher audits its own caption: ACCEPT / REVISE: new text /
              REJECT: reason. Rejected clips stay in the manifest but lose
              the caption and get no pairs.
    expand    teacher writes instruction-response pairs grounded in the
              audited caption

Each stage is a full pass over the manifest and writes a checkpoint, so a
killed run resumes from the last completed stage instead of re-buying
expensive teacher calls. Per-clip failures are isolated: the clip keeps its
pre-stage state, is reported as errored, and the run continues.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

from .core import (
    CandidateSet,
    Critique,
    CritiqueState,
    CurationRecord,
    InstructionPair,
    Provenance,
    Route,
    RouteDecision,
    read_manifest,
    utc_timestamp,
    write_manifest,
)
from .gateway import EngineConfig, Gateway, GatewayError, MalformedResponse
from .similarity import consistency_score

logger = logging.getLogger(__name__)

STAGES = ("verify", "generate", "critique", "expand")

# Stage markers let the bundled mock teacher tell prompts apart; custom
# templates that drop them only affect mock runs, not real endpoints.
CRITIQUE_MARKER = "Audit the draft description"
EXPAND_MARKER = "instruction-response pairs"

DEFAULT_GENERATE_TEMPLATE = (
    "Listen to the audio at {audio}. Describe only what is audibly present: "
    "speech character, ambient sounds, and notable acoustic events. Do not "
    "state anything that cannot be verified from the sound alone."
)
DEFAULT_CRITIQUE_TEMPLATE = (
    "Audit the draft description of the audio at {audio}.\n"
    "Draft: {caption}\n"
    "Reply with exactly one line: ACCEPT, or REVISE: <corrected description>, "
    "or REJECT: <reason>. Remove every detail not grounded in the audio."
)
DEFAULT_EXPAND_TEMPLATE = (
    "Write up to {max_pairs} instruction-response pairs about the audio at "
    "{audio}, grounded strictly in this audited description: {caption}\n"
    "Format each pair as two lines: 'Q: <instruction>' then 'A: <response>'."
)

# Slot names that would leak transcriptions into the generate prompt.
_FORBIDDEN_GENERATE_SLOTS = ("{caption}", "{transcript}", "{transcripts}", "{candidates}")

TeacherFn = Callable[[str, str], str]
"""(prompt, audio_uri) -> response text."""


@dataclass(frozen=True, slots=True)
class RouterConfig:
    """Consistency threshold for the verify stage; scores at the boundary pass
    when boundary_inclusive (only scores strictly below the threshold prune)."""

    tau: float = 0.6
    boundary_inclusive: bool = True

    def __post_init__(self) -> None:
        if not (0.0 <= self.tau <= 1.0):
            raise ValueError(f"tau must be within [0, 1], got {self.tau}")


@dataclass(frozen=True, slots=True)
class PromptTemplates:
    """Prompt text for the three teacher stages.

    The generate template sees the audio reference only: it must not carry a
    transcription slot, so ASR text can never leak into caption prompts.
    """

    generate_template: str = DEFAULT_GENERATE_TEMPLATE
    critique_template: str = DEFAULT_CRITIQUE_TEMPLATE
    expand_template: str = DEFAULT_EXPAND_TEMPLATE
    template_id: str = "builtin-v1"

    def __post_init__(self) -> None:
        if not self.template_id:
            raise ValueError("template_id must be non-empty")
        for slot in _FORBIDDEN_GENERATE_SLOTS:
            if slot in self.generate_template:
                raise ValueError(
                    f"generate_template must not contain the transcription slot {slot}"
                )
        self._check_render("generate_template", self.generate_template, audio="x")
        self._check_render(
            "critique_template", self.critique_template, audio="x", caption="y"
        )
        self._check_render(
            "expand_template", self.expand_template, audio="x", caption="y", max_pairs=1
        )
        if "{audio}" not in self.generate_template:
            raise ValueError("generate_template must contain the {audio} slot")

    @staticmethod
    def _check_render(name: str, template: str, **slots) -> None:
        try:
            template.format(**slots)
        except (KeyError, IndexError, ValueError) as exc:
            raise ValueError(f"{name} has an invalid slot: {exc}") from None


DEFAULT_TEMPLATES = PromptTemplates()


def route(pair: CandidateSet, cfg: RouterConfig) -> RouteDecision:
    """Route one transcription pair: bypass, pass, or prune.

    Both normalized texts empty -> soundmark bypass, no score computed.
    Otherwise the consistency score decides against the threshold; a
    speech/no-speech disagreement scores 0 and prunes at any tau > 0.
    """
    if len(pair.candidates) != 2:
        raise ValueError(
            f"clip {pair.clip_id}: routing requires exactly 2 candidates, "
            f"got {len(pair.candidates)}"
        )
    a = pair.candidates[0].normalized_text
    b = pair.candidates[1].normalized_text
    if not a and not b:
        return RouteDecision.bypass_soundmark()
    score = consistency_score(a, b)
    passed = score >= cfg.tau if cfg.boundary_inclusive else score > cfg.tau
    return RouteDecision.passed(score) if passed else RouteDecision.pruned(score)


def generate_caption(
    record: CurationRecord, templates: PromptTemplates, teacher: TeacherFn
) -> str:
    """Ask the teacher for a caption; prompts carry the audio reference only."""
    if record.route is None or record.route.kind is Route.PRUNED:
        raise ValueError(
            f"clip {record.clip_id}: caption generation requires a pass or "
            f"bypass route, got {record.route.kind.value if record.route else None}"
        )
    prompt = templates.generate_template.format(audio=record.clip.uri)
    return teacher(prompt, record.clip.uri)


def parse_critique_verdict(text: str) -> Critique:
    """Parse the rigid verdict grammar: ACCEPT | REVISE: <text> | REJECT: <reason>."""
    verdict = text.strip()
    if verdict == "ACCEPT":
        return Critique.accepted()
    if verdict.startswith("REVISE:"):
        revised = verdict[len("REVISE:"):].strip()
        if not revised:
            raise MalformedResponse("REVISE verdict with empty replacement caption")
        return Critique.revised(revised)
    if verdict.startswith("REJECT:"):
        return Critique.rejected(verdict[len("REJECT:"):].strip())
    raise MalformedResponse(f"unparseable critique verdict: {verdict[:80]!r}")


def critique_caption(
    record: CurationRecord, templates: PromptTemplates, teacher: TeacherFn
) -> Critique:
    """Teacher audit of the current caption; unparseable verdicts raise and
    leave the record's critique state untouched at the caller."""
    if record.caption is None:
        raise ValueError(f"clip {record.clip_id}: critique requires a caption")
    prompt = templates.critique_template.format(
        audio=record.clip.uri, caption=record.caption
    )
    return parse_critique_verdict(teacher(prompt, record.clip.uri))


def parse_instruction_pairs(text: str) -> list[tuple[str, str]]:
    """Extract (instruction, response) pairs from Q:/A: lines; incomplete or
    empty entries are dropped."""
    pairs = []
    question: str | None = None
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("Q:"):
            question = line[2:].strip() or None
        elif line.startswith("A:") and question:
            answer = line[2:].strip()
            if answer:
                pairs.append((question, answer))
            question = None
    return pairs


def expand_instructions(
    record: CurationRecord,
    templates: PromptTemplates,
    teacher: TeacherFn,
    *,
    max_pairs: int = 4,
    provenance: Provenance,
) -> tuple[InstructionPair, ...]:
    """Instruction-response pairs grounded in the audited caption.

    The teacher decides how many pairs to write, capped at max_pairs. Zero
    parseable pairs is not an error: the record is kept with empty pairs and
    a diagnostic is logged.
    """
    if record.critique.state not in (CritiqueState.ACCEPTED, CritiqueState.REVISED):
        raise ValueError(
            f"clip {record.clip_id}: expansion requires an accepted or revised "
            f"critique, got {record.critique.state.value}"
        )
    if record.caption is None:
        raise ValueError(f"clip {record.clip_id}: expansion requires a caption")
    prompt = templates.expand_template.format(
        audio=record.clip.uri, caption=record.caption, max_pairs=max_pairs
    )
    parsed = parse_instruction_pairs(teacher(prompt, record.clip.uri))
    if not parsed:
        logger.warning("clip %s: teacher produced no valid instruction pairs", record.clip_id)
        return ()
    return tuple(
        InstructionPair(
            instruction=question,
            response=answer,
            clip_id=record.clip_id,
            provenance=provenance,
        )
        for question, answer in parsed[:max_pairs]
    )


@dataclass(frozen=True, slots=True)
class RunReport:
    """Disjoint per-run totals; raw = bypass + passed + pruned + errored."""

    raw: int
    bypass: int
    passed: int
    pruned: int
    errored: int
    errored_clips: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "raw": self.raw,
            "bypass": self.bypass,
            "pass": self.passed,
            "pruned": self.pruned,
            "errored": self.errored,
            "errored_clips": list(self.errored_clips),
        }

    def summary(self) -> str:
        return (
            f"raw={self.raw} bypass={self.bypass} pass={self.passed} "
            f"pruned={self.pruned} errored={self.errored}"
        )


class CurationPipeline:
    """Runs the four stages over a manifest with bounded parallel workers.

    Per-clip work is embarrassingly parallel; workers return (record, error)
    pairs and all aggregation happens on the coordinating thread, so there is
    no shared mutable state to contend on. Output manifests are sorted by
    clip_id, which makes results independent of completion order and worker
    count.
    """

    def __init__(
        self,
        gateway: Gateway,
        engines: Sequence[EngineConfig],
        teacher: EngineConfig,
        router: RouterConfig = RouterConfig(),
        templates: PromptTemplates = DEFAULT_TEMPLATES,
        *,
        workers: int = 16,
        max_pairs_per_clip: int = 4,
        run_timestamp: str | None = None,
        config_fingerprint: str | None = None,
        progress_interval: int = 200,
    ):
        if len(engines) != 2:
            raise ValueError(f"curation requires exactly 2 engines, got {len(engines)}")
        if engines[0].engine_id == engines[1].engine_id:
            raise ValueError(f"engine ids must be distinct, got {engines[0].engine_id!r} twice")
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        if max_pairs_per_clip < 1:
            raise ValueError(f"max_pairs_per_clip must be >= 1, got {max_pairs_per_clip}")
        self.gateway = gateway
        self.engines = tuple(engines)
        self.teacher = teacher
        self.router = router
        self.templates = templates
        self.workers = workers
        self.max_pairs_per_clip = max_pairs_per_clip
        self.run_timestamp = run_timestamp or utc_timestamp()
        self.progress_interval = progress_interval
        self.fingerprint = config_fingerprint or self._default_fingerprint()

    def _default_fingerprint(self) -> str:
        canonical = json.dumps(
            {
                "engines": [[e.engine_id, e.endpoint_url] for e in self.engines],
                "teacher": [self.teacher.engine_id, self.teacher.endpoint_url],
                "router": [self.router.tau, self.router.boundary_inclusive],
                "templates": [
                    self.templates.template_id,
                    self.templates.generate_template,
                    self.templates.critique_template,
                    self.templates.expand_template,
                ],
                "max_pairs_per_clip": self.max_pairs_per_clip,
            },
            sort_keys=True,
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    # --- per-record stage transitions ------------------------------------

    def _verify_record(self, record: CurationRecord) -> CurationRecord:
        candidates = record.candidates
        if candidates is None:
            candidates = self.gateway.transcribe_pair(record.clip, self.engines)
        decision = record.route or route(candidates, self.router)
        return replace(record, candidates=candidates, route=decision)

    def _teacher_fn(self) -> TeacherFn:
        return lambda prompt, uri: self.gateway.teacher_call(prompt, uri, self.teacher)

    def _generate_record(self, record: CurationRecord) -> CurationRecord:
        caption = generate_caption(record, self.templates, self._teacher_fn())
        return replace(record, caption=caption)

    def _critique_record(self, record: CurationRecord) -> CurationRecord:
        critique = critique_caption(record, self.templates, self._teacher_fn())
        caption = record.caption
        if critique.state is CritiqueState.REVISED:
            caption = critique.detail
        elif critique.state is CritiqueState.REJECTED:
            caption = None  # clip is retained, its caption is not
        return replace(record, caption=caption, critique=critique)

    def _expand_record(self, record: CurationRecord) -> CurationRecord:
        provenance = Provenance(
            teacher_endpoint_id=self.teacher.engine_id,
            prompt_template_id=self.templates.template_id,
            timestamp=self.run_timestamp,
        )
        pairs = expand_instructions(
            record,
            self.templates,
            self._teacher_fn(),
            max_pairs=self.max_pairs_per_clip,
            provenance=provenance,
        )
        return replace(record, pairs=pairs)

    # --- stage eligibility (also what makes re-runs and resumes no-ops) --

    @staticmethod
    def _needs_verify(record: CurationRecord) -> bool:
        return record.candidates is None or record.route is None

    @staticmethod
    def _needs_generate(record: CurationRecord) -> bool:
        return (
            record.route is not None
            and record.route.kind in (Route.PASS, Route.BYPASS_SOUNDMARK)
            and record.caption is None
            and record.critique.state is CritiqueState.NOT_RUN
        )

    @staticmethod
    def _needs_critique(record: CurationRecord) -> bool:
        return record.caption is not None and record.critique.state is CritiqueState.NOT_RUN

    @staticmethod
    def _needs_expand(record: CurationRecord) -> bool:
        return (
            record.critique.state in (CritiqueState.ACCEPTED, CritiqueState.REVISED)
            and record.caption is not None
            and not record.pairs
        )

    def _stage_fns(self, stage: str):
        return {
            "verify": (self._needs_verify, self._verify_record),
            "generate": (self._needs_generate, self._generate_record),
            "critique": (self._needs_critique, self._critique_record),
            "expand": (self._needs_expand, self._expand_record),
        }[stage]

    def _run_stage(
        self,
        stage: str,
        records: list[CurationRecord],
        errored: dict[str, str],
    ) -> list[CurationRecord]:
        needs, apply = self._stage_fns(stage)

        def work(record: CurationRecord) -> tuple[CurationRecord, str | None]:
            if not needs(record):
                return record, None
            try:
                return apply(record), None
            except GatewayError as exc:
                return record, str(exc)

        out: list[CurationRecord] = []
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            for done, (record, error) in enumerate(pool.map(work, records), 1):
                if error is not None:
                    errored[record.clip_id] = error
                    logger.warning("stage %s: clip %s errored: %s", stage, record.clip_id, error)
                out.append(record)
                if done % self.progress_interval == 0:
                    logger.info("stage %s: %d/%d records", stage, done, len(records))
        logger.info("stage %s complete: %d records", stage, len(out))
        return out

    # --- checkpointing ----------------------------------------------------

    @staticmethod
    def _stage_path(manifest_out: Path, stage: str) -> Path:
        return manifest_out.with_name(f"{manifest_out.name}.stage-{stage}")

    @staticmethod
    def _meta_path(manifest_out: Path) -> Path:
        return manifest_out.with_name(manifest_out.name + ".stages.json")

    def _load_resume_state(
        self, manifest_out: Path
    ) -> tuple[list[str], list[CurationRecord]] | None:
        meta_path = self._meta_path(manifest_out)
        if not meta_path.exists():
            return None
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except (OSError, ValueError):
            logger.warning("unreadable stage metadata at %s; starting fresh", meta_path)
            return None
        if meta.get("fingerprint") != self.fingerprint:
            logger.info("stage metadata at %s is for a different config; starting fresh", meta_path)
            return None
        completed = [s for s in meta.get("completed", []) if s in STAGES]
        for stage in reversed(completed):
            checkpoint = self._stage_path(manifest_out, stage)
            if not checkpoint.exists():
                continue
            try:
                records = list(read_manifest(checkpoint))
            except Exception:
                logger.warning("unreadable checkpoint %s; trying earlier stage", checkpoint)
                continue
            # Reuse the original run's timestamp so a resumed run is
            # byte-identical to an uninterrupted one.
            if meta.get("run_timestamp"):
                self.run_timestamp = meta["run_timestamp"]
            done = completed[: completed.index(stage) + 1]
            logger.info("resuming after stage %s (%d records)", stage, len(records))
            return done, records
        return None

    def _write_checkpoint(
        self, manifest_out: Path, stage: str, completed: list[str], records: list[CurationRecord]
    ) -> None:
        write_manifest(records, self._stage_path(manifest_out, stage))
        meta = {
            "fingerprint": self.fingerprint,
            "run_timestamp": self.run_timestamp,
            "completed": completed,
        }
        meta_path = self._meta_path(manifest_out)
        partial = meta_path.with_name(meta_path.name + ".partial")
        partial.write_text(json.dumps(meta, indent=2), encoding="utf-8")
        partial.replace(meta_path)

    def _cleanup_checkpoints(self, manifest_out: Path) -> None:
        for stage in STAGES:
            self._stage_path(manifest_out, stage).unlink(missing_ok=True)
        self._meta_path(manifest_out).unlink(missing_ok=True)

    # --- entry points -------------------------------------------------------

    def _report(
        self, records: list[CurationRecord], errored: dict[str, str]
    ) -> RunReport:
        counts = {Route.BYPASS_SOUNDMARK: 0, Route.PASS: 0, Route.PRUNED: 0}
        for record in records:
            if record.clip_id in errored:
                continue
            if record.route is not None:
                counts[record.route.kind] += 1
        return RunReport(
            raw=len(records),
            bypass=counts[Route.BYPASS_SOUNDMARK],
            passed=counts[Route.PASS],
            pruned=counts[Route.PRUNED],
            errored=len(errored),
            errored_clips=tuple(sorted(errored)),
        )

    def verify_only(self, manifest_in: Path | str, manifest_out: Path | str) -> RunReport:
        """The verify stage alone: dual-engine fanout plus routing."""
        records = sorted(read_manifest(Path(manifest_in)), key=lambda r: r.clip_id)
        errored: dict[str, str] = {}
        records = self._run_stage("verify", records, errored)
        write_manifest(records, Path(manifest_out))
        return self._report(records, errored)

    def run(
        self, manifest_in: Path | str, manifest_out: Path | str, *, resume: bool = True
    ) -> RunReport:
        """All four stages, checkpointed; every input clip appears in the
        output exactly once, sorted by clip_id."""
        manifest_out = Path(manifest_out)
        completed: list[str] = []
        records: list[CurationRecord] | None = None
        if resume:
            state = self._load_resume_state(manifest_out)
            if state is not None:
                completed, records = state
        if records is None:
            completed = []
            records = sorted(read_manifest(Path(manifest_in)), key=lambda r: r.clip_id)
        errored: dict[str, str] = {}
        for stage in STAGES:
            if stage in completed:
                continue
            records = self._run_stage(stage, records, errored)
            if stage != STAGES[-1]:
                completed = completed + [stage]
                self._write_checkpoint(manifest_out, stage, completed, records)
        write_manifest(records, manifest_out)
        self._cleanup_checkpoints(manifest_out)
        return self._report(records, errored)
