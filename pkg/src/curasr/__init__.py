"""curasr: dual-ASR curation and perplexity-arbitration toolkit for audio manifests.

Library surface in one import:

    core        domain records and the line-delimited manifest format
    similarity  text normalization and the consistency score
    gateway     HTTP clients for engines, teacher, and remote scorers
    mockserver  fixture-scripted mock endpoints for offline runs
    curation    verify / generate / critique / expand pipeline
    arbiter     perplexity scoring and candidate selection
    stats       corpus accounting and plot-data emission
    sft_export  training-ready record export
    config      declarative run configuration
    cli         the `curasr` command
"""

from .arbiter import (
    AcousticContext,
    ArbitrationError,
    ArbitrationOutcome,
    InjectionMode,
    ReferenceScorer,
    RemoteModelScorer,
    ScoredCandidate,
    Scorer,
    ac_ppl,
    arbitrate,
    arbitrate_with_mode,
)
from .config import ConfigError, PipelineConfig, ScorerConfig, load_config
from .core import (
    AudioClipRef,
    Candidate,
    CandidateSet,
    Critique,
    CritiqueState,
    CurationRecord,
    InstructionPair,
    InvariantViolation,
    LabelTag,
    ManifestError,
    ManifestLineError,
    Provenance,
    Route,
    RouteDecision,
    SftRecord,
    read_manifest,
    write_manifest,
    write_sft_file,
)
from .curation import (
    CurationPipeline,
    PromptTemplates,
    RouterConfig,
    RunReport,
    critique_caption,
    expand_instructions,
    generate_caption,
    route,
)
from .gateway import (
    EngineConfig,
    EngineError,
    Gateway,
    GatewayError,
    GatewayTimeout,
    MalformedResponse,
    TranscriptionResult,
)
from .mockserver import MockServer
from .sft_export import ARBITRATED, ExportError, export_sft, sft_records_for
from .similarity import NormalizerConfig, consistency_score, edit_distance, normalize_text
from .stats import (
    CorpusAccounting,
    DistributionReport,
    SweepPoint,
    corpus_accounting,
    emit_plot_data,
    label_distribution,
    tau_sweep,
)

__version__ = "0.1.0"
