"""doctrace: synthetic reasoning-trace datasets for long-document VQA.

The package covers the full tooling loop around trace-based distillation:
question synthesis over page-image documents, per-page evidence extraction
and bounded top-K ranking, dual-branch answer generation, control-token-gated
training examples with JSONL serialization and dataset mixing, task-arithmetic
checkpoint merging, and benchmark score aggregation.
"""

from .answer import AnswerRecord, Branch, choose_branch
from .backend import HttpBackend, ScriptedBackend, complete, complete_batch
from .chat import (
    ChatMessage,
    ChatRequest,
    ChatResponse,
    FinishReason,
    ImagePart,
    RetryPolicy,
    Role,
    TextPart,
    request_fingerprint,
)
from .config import PipelineConfig, TraceFormat, validate_config
from .core import DocumentRef, PageImage, Question, SourceMode, load_document
from .errors import DoctraceError
from .evalstats import (
    AggregateConfig,
    LengthStats,
    ScoreTable,
    aggregate,
    deltas,
    length_stats,
    normalize_scores,
    run_variance,
)
from .extract import (
    EvidenceRecord,
    RankedEvidence,
    build_extraction_prompt,
    extract_document,
    parse_extraction,
    rank_and_select,
)
from .merge import (
    MergePlan,
    MergeSpec,
    TensorStore,
    apply_merge_plan,
    task_arithmetic_merge,
    validate_compatibility,
)
from .mixing import MixPart, MixSource, MixSpec, mix_datasets
from .pipeline import RunConfig, RunManifest, run_generate
from .qgen import QuestionSpec, generate_question, sample_source_pages
from .tracegen import (
    TrainingExample,
    assemble_example,
    dataset_report,
    read_jsonl,
    render_trace_v1,
    render_trace_v2,
    strip_think,
    write_jsonl,
)

__version__ = "0.1.0"

__all__ = [
    "AggregateConfig",
    "AnswerRecord",
    "Branch",
    "ChatMessage",
    "ChatRequest",
    "ChatResponse",
    "DocumentRef",
    "DoctraceError",
    "EvidenceRecord",
    "FinishReason",
    "HttpBackend",
    "ImagePart",
    "LengthStats",
    "MergePlan",
    "MergeSpec",
    "MixPart",
    "MixSource",
    "MixSpec",
    "PageImage",
    "PipelineConfig",
    "Question",
    "QuestionSpec",
    "RankedEvidence",
    "RetryPolicy",
    "Role",
    "RunConfig",
    "RunManifest",
    "ScoreTable",
    "ScriptedBackend",
    "SourceMode",
    "TensorStore",
    "TextPart",
    "TraceFormat",
    "TrainingExample",
    "aggregate",
    "apply_merge_plan",
    "assemble_example",
    "build_extraction_prompt",
    "choose_branch",
    "complete",
    "complete_batch",
    "dataset_report",
    "deltas",
    "extract_document",
    "generate_question",
    "length_stats",
    "load_document",
    "mix_datasets",
    "normalize_scores",
    "parse_extraction",
    "rank_and_select",
    "read_jsonl",
    "render_trace_v1",
    "render_trace_v2",
    "request_fingerprint",
    "run_generate",
    "run_variance",
    "sample_source_pages",
    "strip_think",
    "task_arithmetic_merge",
    "validate_compatibility",
    "validate_config",
    "write_jsonl",
]
