"""Reasoning-trace rendering and control-token-gated training examples.

Two trace designs coexist. The v1 trace walks every page in document order
and labels non-relevant pages ``irrelevant`` — an unbounded sequential scan
that grows with the document. The v2 trace keeps only the top-K relevant
pages sorted from most to least relevant: a bounded retrieval procedure with
no irrelevant markers. Examples gate the trace behind a literal ``<cot>``
token in the system prompt so the mode can be switched at inference time.
"""

from __future__ import annotations

import json
import os
import random
import statistics
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .answer import AnswerRecord, Branch
from .chat import ImagePart, TextPart
from .config import PipelineConfig, TraceFormat
from .core import DocumentRef, PageImage, Question
from .errors import MalformedLine, MalformedThinkBlock
from .extract import EvidenceRecord, RankedEvidence

COT_TOKEN = "<cot>"
THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
EMPTY_TRACE_SENTINEL = "No relevant pages found."

DEFAULT_SYSTEM_PROMPT = (
    "You are a document assistant. Read the provided pages and answer the "
    "user's question accurately."
)


def render_trace_v2(ranked: RankedEvidence) -> str:
    """Bounded trace: top-K snippets, most relevant first, no scores shown."""
    if len(ranked) == 0:
        body = EMPTY_TRACE_SENTINEL
    else:
        body = "\n".join(f"Page {e.page_index}: {e.snippet}" for e in ranked.entries)
    return f"{THINK_OPEN}\n{body}\n{THINK_CLOSE}"


def render_trace_v1(records: Sequence[EvidenceRecord], threshold: float) -> str:
    """Sequential-scan trace: one line per page in document order.

    Pages below the threshold are labeled ``irrelevant``; the line count always
    equals the document length, which is exactly the unbounded growth that
    motivated the v2 redesign.
    """
    indices = [r.page_index for r in records]
    if indices != list(range(1, len(indices) + 1)):
        raise ValueError(f"records must cover pages 1..N in order, got {indices}")
    lines = [
        f"Page {r.page_index}: {r.snippet}" if r.score >= threshold
        else f"Page {r.page_index}: irrelevant"
        for r in records
    ]
    return f"{THINK_OPEN}\n" + "\n".join(lines) + f"\n{THINK_CLOSE}"


def trace_line_count(assistant: str) -> int:
    """Number of lines inside the think block; 0 when there is none."""
    if THINK_OPEN not in assistant:
        return 0
    inner = assistant.split(THINK_OPEN, 1)[1].split(THINK_CLOSE, 1)[0]
    return len([line for line in inner.split("\n") if line.strip()])


UserPart = TextPart | ImagePart


@dataclass(frozen=True)
class TrainingExample:
    system: str
    user: tuple[UserPart, ...]
    assistant: str
    has_cot: bool
    branch: Branch
    trace_format: TraceFormat

    def __post_init__(self):
        has_token = COT_TOKEN in self.system
        starts_think = self.assistant.startswith(THINK_OPEN)
        closes = self.assistant.count(THINK_CLOSE)
        if self.has_cot:
            if not has_token:
                raise ValueError("has_cot example must carry the control token in system")
            if not starts_think or closes != 1:
                raise ValueError("gated assistant must start with one well-formed think block")
        else:
            if has_token:
                raise ValueError("ungated example must not carry the control token")
            if THINK_OPEN in self.assistant:
                raise ValueError("ungated assistant must not contain a think block")

    def answer_text(self) -> str:
        """The final answer with any think block removed."""
        if not self.has_cot:
            return self.assistant
        return self.assistant.split(THINK_CLOSE, 1)[1].strip()

    def page_count(self) -> int:
        return sum(1 for p in self.user if isinstance(p, ImagePart))


def document_user_parts(doc: DocumentRef, question: Question) -> tuple[UserPart, ...]:
    """Every document page, each prefixed with its ``Page X:`` marker, then the question."""
    parts: list[UserPart] = []
    for page in doc.pages:
        parts.append(TextPart(f"Page {page.index}:"))
        parts.append(ImagePart(page))
    parts.append(TextPart(question.text))
    return tuple(parts)


def assemble_example(
    doc: DocumentRef,
    question: Question,
    evidence: RankedEvidence | Sequence[EvidenceRecord],
    answer: AnswerRecord,
    cfg: PipelineConfig,
    rng: random.Random,
    *,
    system_prompt: str = DEFAULT_SYSTEM_PROMPT,
) -> TrainingExample:
    """Build one chat-format training example, gating the trace on a Bernoulli draw.

    With probability ``cfg.cot_probability`` the system prompt carries the
    control token and the assistant turn opens with the rendered trace;
    otherwise the assistant is the bare answer.
    """
    gated = rng.random() < cfg.cot_probability
    if not gated:
        return TrainingExample(
            system=system_prompt,
            user=document_user_parts(doc, question),
            assistant=answer.text,
            has_cot=False,
            branch=answer.branch,
            trace_format=TraceFormat.NONE,
        )

    if cfg.trace_format is TraceFormat.V2:
        if not isinstance(evidence, RankedEvidence):
            raise TypeError("v2 traces require RankedEvidence")
        trace = render_trace_v2(evidence)
    elif cfg.trace_format is TraceFormat.V1:
        if isinstance(evidence, RankedEvidence):
            raise TypeError("v1 traces require the full per-page record list")
        trace = render_trace_v1(evidence, cfg.relevance_threshold)
    else:
        raise ValueError(f"cannot assemble a gated example with trace_format={cfg.trace_format}")

    return TrainingExample(
        system=f"{system_prompt}\n{COT_TOKEN}",
        user=document_user_parts(doc, question),
        assistant=f"{trace}\n{answer.text}",
        has_cot=True,
        branch=answer.branch,
        trace_format=cfg.trace_format,
    )


def strip_think_block(assistant: str) -> str:
    """Remove a leading think block from an assistant turn, keeping the answer."""
    if THINK_OPEN not in assistant:
        return assistant
    if THINK_CLOSE not in assistant:
        raise MalformedThinkBlock("opening tag without closing tag")
    return assistant.split(THINK_CLOSE, 1)[1].strip()


def strip_think(example: TrainingExample) -> TrainingExample:
    """Derive the no-think variant: same answer, no control token, no trace.

    Identity on examples that are already ungated.
    """
    if not example.has_cot and THINK_OPEN not in example.assistant:
        return example
    return replace(
        example,
        system=example.system.replace(COT_TOKEN, "").rstrip(),
        assistant=strip_think_block(example.assistant),
        has_cot=False,
        trace_format=TraceFormat.NONE,
    )


# --------------------------------------------------------------------------- #
# JSONL serialization
# --------------------------------------------------------------------------- #


def example_to_dict(example: TrainingExample, *, relative_to: str | Path | None = None) -> dict:
    user = []
    for part in example.user:
        if isinstance(part, TextPart):
            user.append({"type": "text", "text": part.text})
        else:
            path = part.page.image_path
            if relative_to is not None:
                path = os.path.relpath(path, relative_to)
            user.append(
                {
                    "type": "image",
                    "page_index": part.page.index,
                    "path": path,
                    "byte_len": part.page.byte_len,
                }
            )
    return {
        "system": example.system,
        "user": user,
        "assistant": example.assistant,
        "has_cot": example.has_cot,
        "branch": example.branch.value,
        "trace_format": example.trace_format.value,
    }


def example_from_dict(raw: dict) -> TrainingExample:
    parts: list[UserPart] = []
    for part in raw["user"]:
        if part["type"] == "text":
            parts.append(TextPart(part["text"]))
        elif part["type"] == "image":
            parts.append(
                ImagePart(
                    PageImage(
                        index=part["page_index"],
                        image_path=part["path"],
                        byte_len=part["byte_len"],
                    )
                )
            )
        else:
            raise ValueError(f"unknown user part type {part['type']!r}")
    return TrainingExample(
        system=raw["system"],
        user=tuple(parts),
        assistant=raw["assistant"],
        has_cot=raw["has_cot"],
        branch=Branch(raw["branch"]),
        trace_format=TraceFormat(raw["trace_format"]),
    )


def write_jsonl(
    path: str | Path,
    examples: Iterable[TrainingExample],
    *,
    relative_to: str | Path | None = None,
) -> int:
    """One compact JSON object per line; returns the number of lines written."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for example in examples:
            record = example_to_dict(example, relative_to=relative_to)
            fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")
            count += 1
    return count


def read_jsonl(path: str | Path) -> Iterator[TrainingExample]:
    """Stream examples back; raises MalformedLine with the offending line number."""
    with open(path, encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                yield example_from_dict(raw)
            except MalformedLine:
                raise
            except Exception as exc:
                raise MalformedLine(number, str(exc))


def read_jsonl_dicts(path: str | Path) -> Iterator[dict]:
    """Schema-agnostic JSONL reader used for mixed datasets and reports."""
    with open(path, encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(number, str(exc))
            if not isinstance(raw, dict):
                raise MalformedLine(number, "line is not a JSON object")
            yield raw


# --------------------------------------------------------------------------- #
# Dataset report
# --------------------------------------------------------------------------- #


def dataset_report(records: Iterable[dict]) -> dict:
    """Summary statistics over a dataset of serialized examples.

    Works on any JSONL records: external-mix examples without the chat-format
    fields count toward the total with zero pages and an ``external`` branch.
    """
    count = 0
    page_counts: list[int] = []
    cot_count = 0
    branch_counts: dict[str, int] = {}
    trace_hist: dict[int, int] = {}

    for record in records:
        count += 1
        user = record.get("user", [])
        pages = sum(1 for p in user if isinstance(p, dict) and p.get("type") == "image")
        page_counts.append(pages)
        if record.get("has_cot"):
            cot_count += 1
        branch = record.get("branch", "external")
        branch_counts[branch] = branch_counts.get(branch, 0) + 1
        length = trace_line_count(record.get("assistant", "") or "")
        trace_hist[length] = trace_hist.get(length, 0) + 1

    return {
        "count": count,
        "pages_mean": statistics.fmean(page_counts) if page_counts else 0.0,
        "pages_median": float(statistics.median(page_counts)) if page_counts else 0.0,
        "cot_fraction": cot_count / count if count else 0.0,
        "branch_fractions": {
            name: branch_counts[name] / count for name in sorted(branch_counts)
        },
        "trace_length_histogram": {
            str(length): trace_hist[length] for length in sorted(trace_hist)
        },
    }
