"""Per-page evidence extraction, relevance scoring, and top-K selection.

Every page is scored independently against the question; records below the
relevance threshold are dropped, the rest are sorted from most to least
relevant and truncated to the top K. Ties break on ascending page index so
the same inputs always produce the same dataset.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, replace
from typing import Callable, Sequence

from .backend import Backend, complete_batch
from .chat import ChatMessage, ChatRequest, ChatResponse, ImagePart, RetryPolicy, Role, TextPart
from .config import PipelineConfig
from .core import DocumentRef, PageImage, Question
from .errors import UnparseableScore
from .prompts import DEFAULT_PROMPTS, PromptLibrary

logger = logging.getLogger(__name__)

_RELEVANCE_RE = re.compile(r"^\s*RELEVANCE:\s*(-?\d+(?:\.\d+)?)\s*$", re.MULTILINE)
_EVIDENCE_RE = re.compile(r"^\s*EVIDENCE:\s*(.*)$", re.MULTILINE | re.DOTALL)


@dataclass(frozen=True)
class EvidenceRecord:
    """One page's extracted snippet and relevance score."""

    page_index: int
    snippet: str
    score: float
    was_clamped: bool = False
    is_source: bool = False


@dataclass(frozen=True)
class RankedEvidence:
    """Threshold-filtered evidence, sorted by relevance, truncated to top K."""

    entries: tuple[EvidenceRecord, ...]
    k_limit: int
    threshold: float

    def __post_init__(self):
        if self.k_limit < 1:
            raise ValueError(f"k_limit must be positive, got {self.k_limit}")
        if len(self.entries) > self.k_limit:
            raise ValueError(f"{len(self.entries)} entries exceed k_limit {self.k_limit}")
        pages = [e.page_index for e in self.entries]
        if len(set(pages)) != len(pages):
            raise ValueError(f"duplicate page indices in ranked evidence: {pages}")
        scores = [e.score for e in self.entries]
        if any(s < self.threshold for s in scores):
            raise ValueError(f"entry below threshold {self.threshold}: {scores}")
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError(f"scores must be non-increasing, got {scores}")

    def page_indices(self) -> list[int]:
        return [e.page_index for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def build_extraction_prompt(
    page: PageImage,
    question: Question,
    is_source: bool,
    cfg: PipelineConfig,
    *,
    model_id: str = "extractor",
    temperature: float = 0.0,
    max_tokens: int = 1024,
    prompts: PromptLibrary = DEFAULT_PROMPTS,
) -> ChatRequest:
    """One page image plus the question; source pages get the guided score band."""
    source_clause = ""
    if is_source:
        source_clause = prompts.get("extraction_source_clause").format(
            floor=cfg.source_score_floor, ceiling=cfg.score_max
        )
    body = prompts.get("extraction").format(
        question=question.text,
        source_clause=source_clause,
        score_min=cfg.score_min,
        score_max=cfg.score_max,
    )
    message = ChatMessage(role=Role.USER, parts=(TextPart(body), ImagePart(page)))
    return ChatRequest(
        model_id=model_id,
        messages=(message,),
        max_tokens=max_tokens,
        temperature=temperature,
    )


def parse_extraction(response: ChatResponse, cfg: PipelineConfig) -> EvidenceRecord:
    """Parse the ``RELEVANCE:`` / ``EVIDENCE:`` reply grammar.

    Scores are clamped into the configured bounds with ``was_clamped`` set.
    The caller fills in ``page_index`` and ``is_source``.
    """
    score_match = _RELEVANCE_RE.search(response.text)
    if score_match is None:
        raise UnparseableScore(f"no RELEVANCE line in: {response.text[:120]!r}")
    score = float(score_match.group(1))

    evidence_match = _EVIDENCE_RE.search(response.text)
    snippet = evidence_match.group(1).strip() if evidence_match else ""

    clamped = False
    if score < cfg.score_min:
        score, clamped = cfg.score_min, True
    elif score > cfg.score_max:
        score, clamped = cfg.score_max, True

    if not snippet and score >= cfg.relevance_threshold:
        # A page claimed relevant must carry evidence text; treat as malformed
        # so the caller's retry-once-then-degrade path applies.
        raise UnparseableScore(
            f"score {score} is above threshold but the EVIDENCE text is empty"
        )

    return EvidenceRecord(
        page_index=0, snippet=snippet, score=score, was_clamped=clamped
    )


def extract_document(
    doc: DocumentRef,
    question: Question,
    cfg: PipelineConfig,
    backend: Backend,
    *,
    policy: RetryPolicy = RetryPolicy(),
    model_id: str = "extractor",
    temperature: float = 0.0,
    max_tokens: int = 1024,
    prompts: PromptLibrary = DEFAULT_PROMPTS,
    log: Callable[[dict], None] | None = None,
) -> list[EvidenceRecord]:
    """Score every page of the document against the question, in page order.

    Always returns exactly ``page_count`` records: a page whose request fails
    or stays unparseable after one retry degrades to score 0.0 with an empty
    snippet instead of aborting the document.
    """

    def build(page: PageImage) -> ChatRequest:
        return build_extraction_prompt(
            page, question, page.index in question.source_pages, cfg,
            model_id=model_id, temperature=temperature, max_tokens=max_tokens, prompts=prompts,
        )

    requests = [build(page) for page in doc.pages]
    results = complete_batch(backend, requests, policy)

    records: dict[int, EvidenceRecord] = {}
    notes: dict[int, str] = {}
    retry_pages: list[PageImage] = []
    for page, result in zip(doc.pages, results):
        if isinstance(result, Exception):
            notes[page.index] = f"backend: {result}"
            continue
        try:
            records[page.index] = replace(parse_extraction(result, cfg), page_index=page.index)
        except UnparseableScore as exc:
            retry_pages.append(page)
            notes[page.index] = f"unparseable: {exc}"

    if retry_pages:
        retry_results = complete_batch(backend, [build(p) for p in retry_pages], policy)
        for page, result in zip(retry_pages, retry_results):
            if isinstance(result, Exception):
                notes[page.index] = f"backend on retry: {result}"
                continue
            try:
                records[page.index] = replace(parse_extraction(result, cfg), page_index=page.index)
                notes.pop(page.index, None)
            except UnparseableScore as exc:
                notes[page.index] = f"unparseable after retry: {exc}"

    out: list[EvidenceRecord] = []
    for page in doc.pages:
        is_source = page.index in question.source_pages
        record = records.get(page.index)
        failed = record is None
        if record is None:
            record = EvidenceRecord(page_index=page.index, snippet="", score=cfg.score_min)
        record = replace(record, is_source=is_source)
        out.append(record)

        note = notes.get(page.index, "")
        if failed:
            logger.warning("doc %s page %d degraded to %.1f (%s)",
                           doc.doc_id, page.index, cfg.score_min, note)
        elif is_source and record.score < cfg.source_score_floor:
            note = f"source page scored {record.score} below floor {cfg.source_score_floor}"
            logger.info("doc %s page %d: %s", doc.doc_id, page.index, note)
        if log is not None:
            log({
                "doc_id": doc.doc_id,
                "page_index": page.index,
                "score": record.score,
                "snippet": record.snippet,
                "was_clamped": record.was_clamped,
                "is_source": is_source,
                "failed": failed,
                "note": note,
            })
    return out


def rank_and_select(records: Sequence[EvidenceRecord], cfg: PipelineConfig) -> RankedEvidence:
    """Filter below-threshold records, sort by relevance, keep the top K.

    Sort order is (score descending, page index ascending); an empty result is
    legal when nothing clears the threshold.
    """
    pages = [r.page_index for r in records]
    if len(set(pages)) != len(pages):
        raise ValueError(f"duplicate page indices: {pages}")
    kept = [r for r in records if r.score >= cfg.relevance_threshold]
    kept.sort(key=lambda r: (-r.score, r.page_index))
    return RankedEvidence(
        entries=tuple(kept[: cfg.top_k]),
        k_limit=cfg.top_k,
        threshold=cfg.relevance_threshold,
    )
