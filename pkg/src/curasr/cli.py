"""Operator entry point wiring configuration to the pipeline stages.

Exit codes: 0 success; 1 usage or configuration error; 2 partial failure
(some clips errored, details in the report); 3 fatal I/O.

A run is fully described by one declarative config file (see config.py)
plus the flag overrides given here; `--dump-config` writes the effective
configuration so the exact run can be reproduced later.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

from .arbiter import (
    AcousticContext,
    ArbitrationOutcome,
    InjectionMode,
    ReferenceScorer,
    RemoteModelScorer,
    Scorer,
    arbitrate_with_mode,
)
from .config import (
    ConfigError,
    PipelineConfig,
    config_fingerprint,
    dump_config,
    load_config,
)
from .core import ManifestError, read_manifest, write_sft_file
from .curation import CurationPipeline, RouterConfig, RunReport
from .gateway import Gateway, GatewayError
from .mockserver import MockServer
from .sft_export import ARBITRATED, ExportError, sft_records_for
from .stats import corpus_accounting, emit_plot_data, label_distribution, tau_sweep

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARTIAL = 2
EXIT_IO = 3

DEFAULT_SWEEP_TAUS = [i / 10 for i in range(11)]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _parse_taus(raw: str) -> list[float]:
    try:
        return [float(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise _UsageError(f"--taus must be a comma-separated list of numbers, got {raw!r}") from None


def build_parser() -> _Parser:
    parser = _Parser(prog="curasr", description=__doc__, add_help=True)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add_common(p, *, config=True, workers=True):
        if config:
            p.add_argument("--config", type=Path, help="declarative run configuration (JSON)")
            p.add_argument(
                "--dump-config", type=Path, help="write the effective configuration and continue"
            )
        if workers:
            p.add_argument("--workers", type=int, help="override worker count")

    p = sub.add_parser("verify", help="dual-engine transcription fanout plus routing")
    p.add_argument("--in", dest="in_path", type=Path, required=True)
    p.add_argument("--out", dest="out_path", type=Path, required=True)
    p.add_argument("--tau", type=float, help="override the consistency threshold")
    p.add_argument("--run-timestamp", help="pin the provenance timestamp (RFC 3339)")
    add_common(p)
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("curate", help="full pipeline: verify, generate, critique, expand")
    p.add_argument("--in", dest="in_path", type=Path, required=True)
    p.add_argument("--out", dest="out_path", type=Path, required=True)
    p.add_argument("--tau", type=float, help="override the consistency threshold")
    p.add_argument("--run-timestamp", help="pin the provenance timestamp (RFC 3339)")
    p.add_argument(
        "--no-resume", action="store_true", help="ignore stage checkpoints and start fresh"
    )
    add_common(p)
    p.set_defaults(handler=cmd_curate)

    p = sub.add_parser("arbitrate", help="select a transcription per clip, or bypass")
    p.add_argument("--in", dest="in_path", type=Path, required=True)
    p.add_argument("--out", dest="out_path", type=Path, required=True)
    p.add_argument(
        "--mode",
        required=True,
        help="injection strategy: none | single:<engine_id> | dual",
    )
    p.add_argument("--trace", type=Path, help="write per-candidate score lines here")
    p.add_argument("--seed", type=int, help="reference scorer seed (overrides config)")
    p.add_argument(
        "--no-fallback",
        action="store_true",
        help="treat scorer failures as clip errors instead of degrading",
    )
    add_common(p, workers=False)
    p.set_defaults(handler=cmd_arbitrate)

    p = sub.add_parser("export-sft", help="flatten a curated manifest into SFT records")
    p.add_argument("--in", dest="in_path", type=Path, required=True)
    p.add_argument("--out", dest="out_path", type=Path, required=True)
    p.add_argument(
        "--ground",
        required=True,
        help="ground transcript source: an engine id, or 'arbitrated'",
    )
    p.add_argument("--seed", type=int, help="reference scorer seed (overrides config)")
    add_common(p, workers=False)
    p.set_defaults(handler=cmd_export_sft)

    p = sub.add_parser("stats", help="corpus reports and plot-data files")
    p.add_argument("--in", dest="in_path", type=Path, required=True)
    p.add_argument("--report", required=True, choices=["labels", "accounting", "sweep"])
    p.add_argument("--taus", help="comma-separated thresholds for the sweep report")
    p.add_argument("--out", dest="out_path", type=Path, required=True)
    add_common(p, workers=False)
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("mock-serve", help="launch fixture-scripted mock endpoints")
    p.add_argument("--fixtures", type=Path, required=True)
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(handler=cmd_mock_serve)

    return parser


def _effective_config(args, *, required: bool) -> PipelineConfig | None:
    """Load the config file and apply flag overrides; None when optional and absent."""
    if getattr(args, "config", None) is None:
        if required:
            raise ConfigError("this command requires --config (engine endpoints)")
        return None
    cfg = load_config(args.config)
    try:
        if getattr(args, "tau", None) is not None:
            cfg = dataclasses.replace(
                cfg,
                router=RouterConfig(args.tau, cfg.router.boundary_inclusive),
            )
        if getattr(args, "workers", None) is not None:
            cfg = dataclasses.replace(cfg, workers=args.workers)
        if getattr(args, "run_timestamp", None) is not None:
            cfg = dataclasses.replace(cfg, run_timestamp=args.run_timestamp)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if getattr(args, "dump_config", None) is not None:
        dump_config(cfg, args.dump_config)
    return cfg


def _build_pipeline(cfg: PipelineConfig, gateway: Gateway) -> CurationPipeline:
    return CurationPipeline(
        gateway,
        cfg.engines,
        cfg.teacher,
        cfg.router,
        cfg.templates,
        workers=cfg.workers,
        max_pairs_per_clip=cfg.max_pairs_per_clip,
        run_timestamp=cfg.run_timestamp,
        config_fingerprint=config_fingerprint(cfg),
    )


def _build_scorer(cfg: PipelineConfig | None, gateway: Gateway | None, seed_override: int | None) -> Scorer:
    if seed_override is not None:
        return ReferenceScorer(seed_override)
    if cfg is None:
        return ReferenceScorer(0)
    if cfg.scorer.kind == "reference":
        return ReferenceScorer(cfg.scorer.seed)
    assert gateway is not None
    return RemoteModelScorer(gateway, cfg.scorer.endpoint)


def _emit_report(report: RunReport, out_path: Path) -> None:
    print(report.summary())
    sidecar = out_path.with_name(out_path.name + ".report.json")
    sidecar.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")


def _write_jsonl(rows: list[dict], destination: Path) -> None:
    partial = destination.with_name(destination.name + ".partial")
    try:
        with open(partial, "w", encoding="utf-8") as handle:
            for row in rows:
                handle.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")))
                handle.write("\n")
        os.replace(partial, destination)
    except BaseException:
        partial.unlink(missing_ok=True)
        raise


def cmd_verify(args) -> int:
    cfg = _effective_config(args, required=True)
    with Gateway(normalizer=cfg.normalizer, max_connections=cfg.workers * 2 + 8) as gateway:
        pipeline = _build_pipeline(cfg, gateway)
        report = pipeline.verify_only(args.in_path, args.out_path)
    _emit_report(report, args.out_path)
    return EXIT_PARTIAL if report.errored else EXIT_OK


def cmd_curate(args) -> int:
    cfg = _effective_config(args, required=True)
    with Gateway(normalizer=cfg.normalizer, max_connections=cfg.workers * 2 + 8) as gateway:
        pipeline = _build_pipeline(cfg, gateway)
        report = pipeline.run(args.in_path, args.out_path, resume=not args.no_resume)
    _emit_report(report, args.out_path)
    return EXIT_PARTIAL if report.errored else EXIT_OK


def _parse_mode(raw: str) -> tuple[InjectionMode, str | None]:
    if raw == "none":
        return InjectionMode.NONE, None
    if raw == "dual":
        return InjectionMode.DUAL_ASR, None
    if raw.startswith("single:") and raw[len("single:"):]:
        return InjectionMode.SINGLE_ASR, raw[len("single:"):]
    raise _UsageError(f"--mode must be none, single:<engine_id>, or dual; got {raw!r}")


def _outcome_row(clip_id: str, outcome: ArbitrationOutcome) -> dict:
    selected = outcome.selected
    return {
        "clip_id": clip_id,
        "outcome": "pure_audio_bypass" if outcome.is_bypass else "selected",
        "engine_id": selected.engine_id if selected else None,
        "text": selected.text if selected else None,
        "ac_ppl": selected.ac_ppl if selected else None,
        "degraded": outcome.degraded,
    }


def cmd_arbitrate(args) -> int:
    cfg = _effective_config(args, required=False)
    mode, engine_id = _parse_mode(args.mode)
    gateway = None
    if cfg is not None and cfg.scorer.kind == "remote" and mode is InjectionMode.DUAL_ASR:
        gateway = Gateway(normalizer=cfg.normalizer)
    try:
        scorer = _build_scorer(cfg, gateway, args.seed) if mode is InjectionMode.DUAL_ASR else None
        rows: list[dict] = []
        trace_rows: list[dict] = []
        skipped: dict[str, str] = {}
        degraded = bypassed = selected_count = 0
        records = sorted(read_manifest(args.in_path), key=lambda r: r.clip_id)
        for record in records:
            if record.candidates is None:
                skipped[record.clip_id] = "no candidate set"
                continue
            ctx = AcousticContext(clip_uri=record.clip.uri, context_token=record.clip.uri)
            try:
                outcome = arbitrate_with_mode(
                    mode,
                    record.candidates,
                    ctx,
                    scorer,
                    engine_id=engine_id,
                    fallback_on_scorer_error=not args.no_fallback,
                )
            except (ValueError, GatewayError) as exc:
                skipped[record.clip_id] = str(exc)
                continue
            rows.append(_outcome_row(record.clip_id, outcome))
            for entry in outcome.scored:
                trace_rows.append(
                    {
                        "clip_id": record.clip_id,
                        "engine_id": entry.engine_id,
                        "text": entry.text,
                        "ac_ppl": entry.ac_ppl,
                        "selected": (
                            outcome.selected is not None
                            and entry.engine_id == outcome.selected.engine_id
                        ),
                    }
                )
            if outcome.is_bypass:
                bypassed += 1
            else:
                selected_count += 1
            if outcome.degraded:
                degraded += 1
    finally:
        if gateway is not None:
            gateway.close()
    _write_jsonl(rows, args.out_path)
    if args.trace is not None:
        _write_jsonl(trace_rows, args.trace)
    print(
        f"arbitrated={len(rows)} selected={selected_count} bypass={bypassed} "
        f"degraded={degraded} skipped={len(skipped)}"
    )
    for clip_id, reason in sorted(skipped.items()):
        logger.warning("skipped clip %s: %s", clip_id, reason)
    return EXIT_PARTIAL if skipped else EXIT_OK


def cmd_export_sft(args) -> int:
    cfg = _effective_config(args, required=False)
    gateway = None
    if cfg is not None and cfg.scorer.kind == "remote" and args.ground == ARBITRATED:
        gateway = Gateway(normalizer=cfg.normalizer)
    try:
        scorer = _build_scorer(cfg, gateway, args.seed) if args.ground == ARBITRATED else None
        errors: dict[str, str] = {}
        exported = []
        clips_with_output = 0
        records = sorted(read_manifest(args.in_path), key=lambda r: r.clip_id)
        for record in records:
            try:
                batch = sft_records_for(record, args.ground, scorer)
            except ExportError as exc:
                errors[exc.clip_id or record.clip_id] = str(exc)
                continue
            if batch:
                clips_with_output += 1
                exported.extend(batch)
    finally:
        if gateway is not None:
            gateway.close()
    count = write_sft_file(exported, args.out_path)
    print(f"exported={count} clips={clips_with_output} errors={len(errors)}")
    for clip_id, reason in sorted(errors.items()):
        logger.warning("export error for clip %s: %s", clip_id, reason)
    return EXIT_PARTIAL if errors else EXIT_OK


def cmd_stats(args) -> int:
    cfg = _effective_config(args, required=False)
    if args.report == "labels":
        report = label_distribution(read_manifest(args.in_path))
        emit_plot_data(report, "labels", args.out_path)
        print(
            f"labels: assignments={report.total_assignments} clips={report.total_clips} "
            f"hours={report.total_hours:.2f} retention={report.retention:.4f}"
        )
    elif args.report == "accounting":
        accounting = corpus_accounting(read_manifest(args.in_path))
        args.out_path.write_text(
            json.dumps(accounting.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
        print(
            f"accounting: clips={accounting.clips} validated={accounting.validated} "
            f"pruned={accounting.pruned} hours={accounting.hours:.2f} "
            f"retention={accounting.retention:.4f}"
        )
    else:
        taus = _parse_taus(args.taus) if args.taus else DEFAULT_SWEEP_TAUS
        boundary = cfg.router.boundary_inclusive if cfg is not None else True
        pairs = (
            record.candidates
            for record in read_manifest(args.in_path)
            if record.candidates is not None
        )
        points = tau_sweep(pairs, taus, boundary_inclusive=boundary)
        emit_plot_data(points, "sweep", args.out_path)
        print(f"sweep: {len(points)} thresholds written to {args.out_path}")
    return EXIT_OK


def cmd_mock_serve(args) -> int:
    server = MockServer.from_file(args.fixtures, host=args.host, port=args.port)
    server.start()
    print(f"mock server listening at {server.base_url}", flush=True)
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    if not hasattr(args, "handler"):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.handler(args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ManifestError as exc:
        print(f"manifest error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GatewayError as exc:
        print(f"gateway error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


def console_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_entry()
