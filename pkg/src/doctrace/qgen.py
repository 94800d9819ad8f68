"""Question synthesis from known source-page subsets.

Source pages come from one of three selection modes (a single page, an
unbroken run, or a random subset), so each question targets a known slice of
the document ranging from localized lookup to cross-page synthesis.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .backend import Backend, complete
from .chat import ChatMessage, ChatRequest, ImagePart, RetryPolicy, Role, TextPart
from .core import DocumentRef, Question, SourceMode
from .errors import BackendFailure, EmptyGeneration, SpanTooLarge
from .prompts import DEFAULT_PROMPTS, PromptLibrary

DEFAULT_QUESTION_TYPES = ("reasoning", "math", "summarization", "lookup", "comparison")

# Subset sizes for multi-page modes are drawn uniformly from this range,
# capped by the document length.
SPAN_RANGE = (2, 8)


@dataclass(frozen=True)
class QuestionSpec:
    mode: SourceMode
    span_len: int = 1
    question_type: str = "reasoning"

    def __post_init__(self):
        if self.span_len < 1:
            raise ValueError(f"span_len must be >= 1, got {self.span_len}")


def sample_question_spec(
    page_count: int,
    rng: random.Random,
    question_types: tuple[str, ...] = DEFAULT_QUESTION_TYPES,
) -> QuestionSpec:
    """Draw a mode, span length, and question type for one question."""
    mode = rng.choice(list(SourceMode))
    if mode is SourceMode.SINGLE or page_count < 2:
        mode_span = 1
        mode = SourceMode.SINGLE
    else:
        mode_span = rng.randint(SPAN_RANGE[0], min(SPAN_RANGE[1], page_count))
    return QuestionSpec(
        mode=mode, span_len=mode_span, question_type=rng.choice(list(question_types))
    )


def sample_source_pages(
    page_count: int, spec: QuestionSpec, rng: random.Random
) -> frozenset[int]:
    """Pure function of (page_count, spec, rng state): the question's source set."""
    if page_count < 1:
        raise ValueError("page_count must be positive")
    if spec.mode is SourceMode.SINGLE:
        return frozenset({rng.randint(1, page_count)})
    if spec.span_len > page_count:
        raise SpanTooLarge(
            f"span {spec.span_len} exceeds document length {page_count}"
        )
    if spec.mode is SourceMode.CONTIGUOUS:
        start = rng.randint(1, page_count - spec.span_len + 1)
        return frozenset(range(start, start + spec.span_len))
    return frozenset(rng.sample(range(1, page_count + 1), spec.span_len))


def build_question_request(
    doc: DocumentRef,
    pages: frozenset[int],
    spec: QuestionSpec,
    *,
    model_id: str = "question-writer",
    temperature: float = 0.7,
    max_tokens: int = 256,
    prompts: PromptLibrary = DEFAULT_PROMPTS,
) -> ChatRequest:
    """The request carries only the selected pages' images plus a typed prompt."""
    template = prompts.question_template(spec.question_type)
    parts: list[TextPart | ImagePart] = [
        TextPart(template.format(page_count=len(pages), question_type=spec.question_type))
    ]
    for index in sorted(pages):
        parts.append(TextPart(f"Page {index}:"))
        parts.append(ImagePart(doc.page(index)))
    return ChatRequest(
        model_id=model_id,
        messages=(ChatMessage(role=Role.USER, parts=tuple(parts)),),
        max_tokens=max_tokens,
        temperature=temperature,
    )


def generate_question(
    doc: DocumentRef,
    pages: frozenset[int],
    spec: QuestionSpec,
    backend: Backend,
    *,
    policy: RetryPolicy = RetryPolicy(),
    model_id: str = "question-writer",
    temperature: float = 0.7,
    max_tokens: int = 256,
    prompts: PromptLibrary = DEFAULT_PROMPTS,
) -> Question:
    bad = [p for p in pages if not 1 <= p <= doc.page_count]
    if bad:
        raise ValueError(f"pages {bad} out of range for {doc.doc_id!r}")
    request = build_question_request(
        doc, pages, spec,
        model_id=model_id, temperature=temperature, max_tokens=max_tokens, prompts=prompts,
    )
    try:
        response = complete(backend, request, policy)
    except Exception as exc:
        raise BackendFailure(f"question generation failed for {doc.doc_id!r}: {exc}", exc)
    text = response.text.strip()
    if not text:
        raise EmptyGeneration(f"question generator returned blank text for {doc.doc_id!r}")
    return Question(
        text=text,
        source_pages=frozenset(pages),
        source_mode=spec.mode,
        question_type=spec.question_type,
    )
