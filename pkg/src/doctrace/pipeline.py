"""End-to-end dataset generation: documents in, training-example JSONL out.

For every document the pipeline samples questions from known source-page
subsets, scores each page for relevance, selects the bounded top-K evidence,
draws an answer branch, and assembles a control-token-gated training example.
All randomness flows from one seed through per-document generators, so a rerun
with the same config and a scripted backend is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .answer import choose_branch, effective_branch, generate_answer
from .backend import Backend, HttpBackend, ScriptedBackend
from .chat import RetryPolicy
from .config import PipelineConfig, TraceFormat, validate_config
from .core import DocumentRef, load_document
from .errors import BackendFailure, ConfigError, DoctraceError, EmptyGeneration, UnknownConfigKey
from .extract import extract_document, rank_and_select
from .prompts import PromptLibrary
from .qgen import (
    DEFAULT_QUESTION_TYPES,
    generate_question,
    sample_question_spec,
    sample_source_pages,
)
from .tracegen import TrainingExample, assemble_example, write_jsonl

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackendSettings:
    kind: str = "scripted"  # "scripted" or "http"
    endpoint: str | None = None
    auth_env: str = "DOCTRACE_API_TOKEN"
    timeout: float = 120.0
    script_path: str | None = None
    script_fallback: str = "synthetic"
    question_model: str = "question-writer"
    extractor_model: str = "extractor"
    visual_model: str = "visual-teacher"
    text_model: str = "text-teacher"
    # Sampling settings are a config decision; the defaults keep extraction
    # deterministic and let the teachers vary.
    question_temperature: float = 0.7
    extract_temperature: float = 0.0
    answer_temperature: float = 0.7
    question_max_tokens: int = 256
    extract_max_tokens: int = 1024
    answer_max_tokens: int = 2048
    max_attempts: int = 4
    base_backoff: float = 0.5
    max_parallel: int = 8

    def policy(self) -> RetryPolicy:
        return RetryPolicy(
            max_attempts=self.max_attempts,
            base_backoff=self.base_backoff,
            max_parallel=self.max_parallel,
        )


@dataclass(frozen=True)
class GenerateSettings:
    documents_dir: str = ""
    output_path: str = ""
    questions_per_doc: int = 2
    question_types: tuple[str, ...] = DEFAULT_QUESTION_TYPES
    prompt_dir: str | None = None
    failure_ceiling: float = 0.05
    doc_workers: int = 1
    write_extraction_log: bool = True

    def __post_init__(self):
        if not 0.0 <= self.failure_ceiling <= 1.0:
            raise ConfigError(f"failure_ceiling must be in [0, 1], got {self.failure_ceiling}")
        if self.doc_workers < 1:
            raise ConfigError("doc_workers must be >= 1")
        if self.questions_per_doc < 1:
            raise ConfigError("questions_per_doc must be >= 1")


def _settings_from_map(cls, raw: Mapping[str, Any], section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise UnknownConfigKey(f"unknown keys in [{section}]: {', '.join(unknown)}")
    kwargs = dict(raw)
    if "question_types" in kwargs:
        kwargs["question_types"] = tuple(kwargs["question_types"])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}")


@dataclass(frozen=True)
class RunConfig:
    pipeline: PipelineConfig
    backend: BackendSettings
    generate: GenerateSettings

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "RunConfig":
        unknown = sorted(set(raw) - {"pipeline", "backend", "generate"})
        if unknown:
            raise UnknownConfigKey(f"unknown config sections: {', '.join(unknown)}")
        generate = _settings_from_map(GenerateSettings, raw.get("generate", {}), "generate")
        if not generate.documents_dir or not generate.output_path:
            raise ConfigError("[generate]: documents_dir and output_path are required")
        return cls(
            pipeline=validate_config(raw.get("pipeline", {})),
            backend=_settings_from_map(BackendSettings, raw.get("backend", {}), "backend"),
            generate=generate,
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw)

    def snapshot(self) -> dict:
        return {
            "pipeline": self.pipeline.to_dict(),
            "backend": asdict(self.backend),
            "generate": asdict(self.generate),
        }


def make_backend(settings: BackendSettings) -> Backend:
    if settings.kind == "http":
        if not settings.endpoint:
            raise ConfigError("[backend]: http backend requires an endpoint")
        return HttpBackend(
            settings.endpoint, auth_env=settings.auth_env, timeout=settings.timeout
        )
    if settings.kind == "scripted":
        if settings.script_path:
            return ScriptedBackend.from_file(settings.script_path)
        return ScriptedBackend(fallback=settings.script_fallback)
    raise ConfigError(f"[backend]: unknown backend kind {settings.kind!r}")


@dataclass
class RunManifest:
    """Reproducibility record written beside the output on every run."""

    config: dict = field(default_factory=dict)
    rng_seed: int = 0
    documents: int = 0
    questions_attempted: int = 0
    questions_generated: int = 0
    question_failures: int = 0
    pages_extracted: int = 0
    extraction_failures: int = 0
    answer_failures: int = 0
    examples_written: int = 0
    failure_rate: float = 0.0
    wall_time_s: float = 0.0
    output_path: str = ""
    extraction_log_path: str | None = None
    exit_code: int = 0
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def manifest_path_for(output_path: str | Path) -> Path:
    output_path = Path(output_path)
    return output_path.with_name(output_path.stem + ".manifest.json")


def extraction_log_path_for(output_path: str | Path) -> Path:
    output_path = Path(output_path)
    return output_path.with_name(output_path.stem + ".extraction_log.jsonl")


def derive_rng(seed: int, *labels: object) -> random.Random:
    """A generator keyed by (seed, labels), stable across runs and platforms."""
    key = ":".join([str(seed), *(str(label) for label in labels)])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


@dataclass
class _DocResult:
    examples: list[TrainingExample] = field(default_factory=list)
    log_entries: list[dict] = field(default_factory=list)
    questions_attempted: int = 0
    questions_generated: int = 0
    question_failures: int = 0
    pages_extracted: int = 0
    extraction_failures: int = 0
    answer_failures: int = 0


def _process_document(
    doc: DocumentRef,
    cfg: RunConfig,
    backend: Backend,
    prompts: PromptLibrary,
    system_prompt: str,
) -> _DocResult:
    result = _DocResult()
    pipeline = cfg.pipeline
    settings = cfg.backend
    policy = settings.policy()
    rng = derive_rng(pipeline.rng_seed, doc.doc_id)

    def log_entry(entry: dict) -> None:
        result.log_entries.append(entry)
        result.pages_extracted += 1
        if entry["failed"]:
            result.extraction_failures += 1

    for question_index in range(cfg.generate.questions_per_doc):
        result.questions_attempted += 1
        spec = sample_question_spec(doc.page_count, rng, cfg.generate.question_types)
        pages = sample_source_pages(doc.page_count, spec, rng)
        branch = choose_branch(rng, pipeline.text_branch_ratio)
        gate_rng_draw = rng.random()  # gate drawn up front to keep the stream stable

        try:
            question = generate_question(
                doc, pages, spec, backend,
                policy=policy,
                model_id=settings.question_model,
                temperature=settings.question_temperature,
                max_tokens=settings.question_max_tokens,
                prompts=prompts,
            )
        except (BackendFailure, EmptyGeneration) as exc:
            logger.warning("doc %s question %d failed: %s", doc.doc_id, question_index, exc)
            result.question_failures += 1
            continue
        result.questions_generated += 1

        records = extract_document(
            doc, question, pipeline, backend,
            policy=policy,
            model_id=settings.extractor_model,
            temperature=settings.extract_temperature,
            max_tokens=settings.extract_max_tokens,
            prompts=prompts,
            log=log_entry,
        )
        ranked = rank_and_select(records, pipeline)

        try:
            answer = generate_answer(
                doc, ranked, question, effective_branch(branch, ranked), pipeline, backend,
                policy=policy,
                visual_model=settings.visual_model,
                text_model=settings.text_model,
                temperature=settings.answer_temperature,
                max_tokens=settings.answer_max_tokens,
                prompts=prompts,
            )
        except (BackendFailure, EmptyGeneration) as exc:
            logger.warning("doc %s question %d answer failed: %s", doc.doc_id, question_index, exc)
            result.answer_failures += 1
            continue

        evidence = ranked if pipeline.trace_format is TraceFormat.V2 else records
        example = assemble_example(
            doc, question, evidence, answer, pipeline,
            _PresetGate(gate_rng_draw), system_prompt=system_prompt,
        )
        result.examples.append(example)
    return result


class _PresetGate:
    """Replays one pre-drawn uniform value as a random.Random stand-in."""

    def __init__(self, value: float):
        self._value = value

    def random(self) -> float:
        return self._value


def run_generate(cfg: RunConfig, backend: Backend | None = None) -> RunManifest:
    """Run the full pipeline; always returns a manifest, never raises.

    An explicit ``backend`` overrides the configured one, which is how tests
    and fixture-recording runs inject instrumented backends.
    """
    started = time.monotonic()
    manifest = RunManifest(
        config=cfg.snapshot(),
        rng_seed=cfg.pipeline.rng_seed,
        output_path=cfg.generate.output_path,
    )
    output_path = Path(cfg.generate.output_path)
    try:
        output_path.parent.mkdir(parents=True, exist_ok=True)
        if backend is None:
            backend = make_backend(cfg.backend)
        prompts = PromptLibrary(cfg.generate.prompt_dir)
        system_prompt = prompts.get("system").strip()

        documents_dir = Path(cfg.generate.documents_dir)
        doc_dirs = sorted(d for d in documents_dir.iterdir() if d.is_dir())
        if not doc_dirs:
            raise DoctraceError(f"no document directories under {documents_dir}")
        docs = [load_document(d) for d in doc_dirs]
        manifest.documents = len(docs)

        if cfg.generate.doc_workers == 1:
            results = [
                _process_document(doc, cfg, backend, prompts, system_prompt) for doc in docs
            ]
        else:
            with ThreadPoolExecutor(max_workers=cfg.generate.doc_workers) as pool:
                results = list(
                    pool.map(
                        lambda doc: _process_document(doc, cfg, backend, prompts, system_prompt),
                        docs,
                    )
                )

        examples: list[TrainingExample] = []
        log_entries: list[dict] = []
        for result in results:
            examples.extend(result.examples)
            log_entries.extend(result.log_entries)
            manifest.questions_attempted += result.questions_attempted
            manifest.questions_generated += result.questions_generated
            manifest.question_failures += result.question_failures
            manifest.pages_extracted += result.pages_extracted
            manifest.extraction_failures += result.extraction_failures
            manifest.answer_failures += result.answer_failures

        manifest.examples_written = write_jsonl(
            output_path, examples, relative_to=output_path.parent
        )
        if cfg.generate.write_extraction_log:
            log_path = extraction_log_path_for(output_path)
            with open(log_path, "w", encoding="utf-8") as fh:
                for entry in log_entries:
                    fh.write(json.dumps(entry, ensure_ascii=False, separators=(",", ":")) + "\n")
            manifest.extraction_log_path = str(log_path)

        failed = manifest.question_failures + manifest.answer_failures
        if manifest.questions_attempted:
            manifest.failure_rate = failed / manifest.questions_attempted
        if manifest.failure_rate > cfg.generate.failure_ceiling:
            manifest.exit_code = 2
            manifest.error = (
                f"failure rate {manifest.failure_rate:.3f} exceeds "
                f"ceiling {cfg.generate.failure_ceiling:.3f}"
            )
    except Exception as exc:  # runtime failure: record it, keep partial output
        logger.exception("generation run failed")
        manifest.exit_code = 2
        manifest.error = f"{type(exc).__name__}: {exc}"

    manifest.wall_time_s = round(time.monotonic() - started, 3)
    manifest.write(manifest_path_for(output_path))
    return manifest
