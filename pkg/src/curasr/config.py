"""Declarative run configuration: one JSON file describes a whole run.

Config keys mirror the dataclass field names; flag overrides are applied on
top and the effective configuration can be dumped back out, which must
reproduce identical behavior when fed back in. Secrets never live here:
bearer tokens come from the TAI_GATEWAY_TOKEN environment variable.

The fingerprint deliberately excludes `workers` and `run_timestamp`: worker
count must not change results, and the timestamp is adopted from checkpoint
metadata on resume.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .core import _check_timestamp
from .curation import DEFAULT_TEMPLATES, PromptTemplates, RouterConfig
from .gateway import EngineConfig
from .similarity import NormalizerConfig


class ConfigError(ValueError):
    """A configuration file or value violates its invariants."""


@dataclass(frozen=True, slots=True)
class ScorerConfig:
    """Which scorer backend arbitration uses: reference(seed) or remote(endpoint)."""

    kind: str
    seed: int | None = None
    endpoint: EngineConfig | None = None

    def __post_init__(self) -> None:
        if self.kind == "reference":
            if self.seed is None:
                raise ConfigError("reference scorer requires a seed")
        elif self.kind == "remote":
            if self.endpoint is None:
                raise ConfigError("remote scorer requires an endpoint")
        else:
            raise ConfigError(f"scorer kind must be 'reference' or 'remote', got {self.kind!r}")


@dataclass(frozen=True, slots=True)
class PipelineConfig:
    engines: tuple[EngineConfig, EngineConfig]
    teacher: EngineConfig
    router: RouterConfig = RouterConfig()
    normalizer: NormalizerConfig = NormalizerConfig()
    templates: PromptTemplates = DEFAULT_TEMPLATES
    workers: int = 16
    scorer: ScorerConfig = ScorerConfig("reference", seed=0)
    max_pairs_per_clip: int = 4
    run_timestamp: str | None = None

    def __post_init__(self) -> None:
        if len(self.engines) != 2:
            raise ConfigError(f"exactly 2 engines required, got {len(self.engines)}")
        ids = [e.engine_id for e in self.engines] + [self.teacher.engine_id]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"engine and teacher ids must be unique, got {ids}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.max_pairs_per_clip < 1:
            raise ConfigError(f"max_pairs_per_clip must be >= 1, got {self.max_pairs_per_clip}")
        if self.run_timestamp is not None:
            _check_timestamp(self.run_timestamp, "run_timestamp")


def _build(cls, data: dict, where: str, field_names: tuple[str, ...]):
    unknown = set(data) - set(field_names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _engine_from_dict(data, where: str) -> EngineConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: must be an object")
    return _build(
        EngineConfig,
        data,
        where,
        ("engine_id", "endpoint_url", "timeout_ms", "max_retries", "backoff_base_ms"),
    )


def config_from_dict(data: dict, where: str = "config") -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: must be a JSON object")
    known = (
        "engines",
        "teacher",
        "router",
        "normalizer",
        "templates",
        "workers",
        "scorer",
        "max_pairs_per_clip",
        "run_timestamp",
    )
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    raw_engines = data.get("engines")
    if not isinstance(raw_engines, list) or len(raw_engines) != 2:
        raise ConfigError(f"{where}: 'engines' must be a list of exactly 2 engine objects")
    if "teacher" not in data:
        raise ConfigError(f"{where}: missing 'teacher' endpoint")
    engines = tuple(
        _engine_from_dict(raw, f"{where}.engines[{i}]") for i, raw in enumerate(raw_engines)
    )
    teacher = _engine_from_dict(data["teacher"], f"{where}.teacher")

    kwargs: dict = {"engines": engines, "teacher": teacher}
    if "router" in data:
        kwargs["router"] = _build(
            RouterConfig, data["router"], f"{where}.router", ("tau", "boundary_inclusive")
        )
    if "normalizer" in data:
        kwargs["normalizer"] = _build(
            NormalizerConfig,
            data["normalizer"],
            f"{where}.normalizer",
            ("case_fold", "strip_punctuation", "strip_whitespace", "unicode_form"),
        )
    if "templates" in data:
        kwargs["templates"] = _build(
            PromptTemplates,
            data["templates"],
            f"{where}.templates",
            ("generate_template", "critique_template", "expand_template", "template_id"),
        )
    if "scorer" in data:
        raw_scorer = dict(data["scorer"])
        if "endpoint" in raw_scorer and raw_scorer["endpoint"] is not None:
            raw_scorer["endpoint"] = _engine_from_dict(
                raw_scorer["endpoint"], f"{where}.scorer.endpoint"
            )
        kwargs["scorer"] = _build(
            ScorerConfig, raw_scorer, f"{where}.scorer", ("kind", "seed", "endpoint")
        )
    for key in ("workers", "max_pairs_per_clip", "run_timestamp"):
        if key in data:
            kwargs[key] = data[key]
    try:
        return PipelineConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path: Path | str) -> PipelineConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    return config_from_dict(data, where=str(path))


def _engine_to_dict(engine: EngineConfig) -> dict:
    return {
        "engine_id": engine.engine_id,
        "endpoint_url": engine.endpoint_url,
        "timeout_ms": engine.timeout_ms,
        "max_retries": engine.max_retries,
        "backoff_base_ms": engine.backoff_base_ms,
    }


def config_to_dict(cfg: PipelineConfig) -> dict:
    scorer: dict = {"kind": cfg.scorer.kind}
    if cfg.scorer.seed is not None:
        scorer["seed"] = cfg.scorer.seed
    if cfg.scorer.endpoint is not None:
        scorer["endpoint"] = _engine_to_dict(cfg.scorer.endpoint)
    out = {
        "engines": [_engine_to_dict(e) for e in cfg.engines],
        "teacher": _engine_to_dict(cfg.teacher),
        "router": {
            "tau": cfg.router.tau,
            "boundary_inclusive": cfg.router.boundary_inclusive,
        },
        "normalizer": {
            "case_fold": cfg.normalizer.case_fold,
            "strip_punctuation": cfg.normalizer.strip_punctuation,
            "strip_whitespace": cfg.normalizer.strip_whitespace,
            "unicode_form": cfg.normalizer.unicode_form,
        },
        "templates": {
            "generate_template": cfg.templates.generate_template,
            "critique_template": cfg.templates.critique_template,
            "expand_template": cfg.templates.expand_template,
            "template_id": cfg.templates.template_id,
        },
        "workers": cfg.workers,
        "scorer": scorer,
        "max_pairs_per_clip": cfg.max_pairs_per_clip,
    }
    if cfg.run_timestamp is not None:
        out["run_timestamp"] = cfg.run_timestamp
    return out


def dump_config(cfg: PipelineConfig, path: Path | str) -> None:
    """Write the effective configuration; feeding it back reproduces the run."""
    Path(path).write_text(
        json.dumps(config_to_dict(cfg), indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def config_fingerprint(cfg: PipelineConfig) -> str:
    """Identity of everything that affects outputs (not workers, not timestamp)."""
    payload = config_to_dict(cfg)
    payload.pop("workers", None)
    payload.pop("run_timestamp", None)
    canonical = json.dumps(payload, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
