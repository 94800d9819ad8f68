"""Answer generation through the visual and text branches.

The visual branch shows the teacher the top-ranked page images and never the
extracted text; the text branch shows only the extracted snippets and never an
image. Keeping the two strictly isolated is what ties the text-branch answer
causally to the evidence trace.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum

from .backend import Backend, complete
from .chat import ChatMessage, ChatRequest, ImagePart, RetryPolicy, Role, TextPart
from .config import PipelineConfig
from .core import DocumentRef, Question
from .errors import BackendFailure, EmptyGeneration, NoEvidence
from .extract import RankedEvidence
from .prompts import DEFAULT_PROMPTS, PromptLibrary


class Branch(str, Enum):
    VISUAL = "visual"
    TEXT = "text"


@dataclass(frozen=True)
class AnswerRecord:
    text: str
    branch: Branch
    teacher_model: str
    input_page_indices: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("answer text is empty")
        if self.branch is Branch.TEXT and self.input_page_indices:
            raise ValueError("text-branch answers must not record input pages")


def choose_branch(rng: random.Random, text_ratio: float) -> Branch:
    """Text branch with probability ``text_ratio``, visual otherwise."""
    if not 0.0 <= text_ratio <= 1.0:
        raise ValueError(f"text_ratio must be in [0, 1], got {text_ratio}")
    return Branch.TEXT if rng.random() < text_ratio else Branch.VISUAL


def effective_branch(branch: Branch, ranked: RankedEvidence) -> Branch:
    """Route to the visual branch when there is no evidence to show."""
    if branch is Branch.TEXT and len(ranked) == 0:
        return Branch.VISUAL
    return branch


def render_evidence_lines(ranked: RankedEvidence) -> str:
    """Snippets as ``Page X: ...`` lines in ranked (most relevant first) order."""
    return "\n".join(f"Page {e.page_index}: {e.snippet}" for e in ranked.entries)


def build_visual_branch_request(
    doc: DocumentRef,
    ranked: RankedEvidence,
    question: Question,
    cfg: PipelineConfig,
    *,
    model_id: str = "visual-teacher",
    temperature: float = 0.7,
    max_tokens: int = 2048,
    prompts: PromptLibrary = DEFAULT_PROMPTS,
) -> ChatRequest:
    """Top-ranked pages as images in ascending page order, no snippet text.

    Falls back to the question's source pages when nothing cleared the
    relevance threshold, so the teacher always sees something to answer from.
    """
    indices = sorted(ranked.page_indices()) or sorted(question.source_pages)
    parts: list[TextPart | ImagePart] = [
        TextPart(prompts.get("answer_visual").format(question=question.text))
    ]
    for index in indices:
        parts.append(TextPart(f"Page {index}:"))
        parts.append(ImagePart(doc.page(index)))
    return ChatRequest(
        model_id=model_id,
        messages=(ChatMessage(role=Role.USER, parts=tuple(parts)),),
        max_tokens=max_tokens,
        temperature=temperature,
    )


def build_text_branch_request(
    ranked: RankedEvidence,
    question: Question,
    cfg: PipelineConfig,
    *,
    model_id: str = "text-teacher",
    temperature: float = 0.7,
    max_tokens: int = 2048,
    prompts: PromptLibrary = DEFAULT_PROMPTS,
) -> ChatRequest:
    """Evidence snippets only, in ranked order; never any image part."""
    if len(ranked) == 0:
        raise NoEvidence("text branch requires at least one evidence entry")
    body = prompts.get("answer_text").format(
        evidence=render_evidence_lines(ranked), question=question.text
    )
    return ChatRequest(
        model_id=model_id,
        messages=(ChatMessage(role=Role.USER, parts=(TextPart(body),)),),
        max_tokens=max_tokens,
        temperature=temperature,
    )


def generate_answer(
    doc: DocumentRef,
    ranked: RankedEvidence,
    question: Question,
    branch: Branch,
    cfg: PipelineConfig,
    backend: Backend,
    *,
    policy: RetryPolicy = RetryPolicy(),
    visual_model: str = "visual-teacher",
    text_model: str = "text-teacher",
    temperature: float = 0.7,
    max_tokens: int = 2048,
    prompts: PromptLibrary = DEFAULT_PROMPTS,
) -> AnswerRecord:
    branch = effective_branch(branch, ranked)
    if branch is Branch.TEXT:
        request = build_text_branch_request(
            ranked, question, cfg,
            model_id=text_model, temperature=temperature, max_tokens=max_tokens, prompts=prompts,
        )
        pages: tuple[int, ...] = ()
        model_id = text_model
    else:
        request = build_visual_branch_request(
            doc, ranked, question, cfg,
            model_id=visual_model, temperature=temperature, max_tokens=max_tokens, prompts=prompts,
        )
        pages = tuple(sorted(ranked.page_indices()) or sorted(question.source_pages))
        model_id = visual_model
    try:
        response = complete(backend, request, policy)
    except Exception as exc:
        raise BackendFailure(f"{branch.value} answer failed for {doc.doc_id!r}: {exc}", exc)
    text = response.text.strip()
    if not text:
        raise EmptyGeneration(f"{branch.value} teacher returned blank text")
    return AnswerRecord(
        text=text, branch=branch, teacher_model=model_id, input_page_indices=pages
    )
