from __future__ import annotations

import json
import random
from pathlib import Path

import numpy as np
import pytest

from doctrace.config import PipelineConfig
from doctrace.core import DocumentRef, Question, SourceMode, load_document
from doctrace.extract import EvidenceRecord, RankedEvidence

# Minimal valid PNG signature plus filler so files are non-empty and distinct.
_PNG_STUB = b"\x89PNG\r\n\x1a\n"


def write_page_files(directory: Path, count: int, *, start: int = 1) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for index in range(start, start + count):
        payload = _PNG_STUB + f"page-{directory.name}-{index}".encode()
        (directory / f"page_{index:04d}.png").write_bytes(payload)


@pytest.fixture
def make_document(tmp_path):
    """Factory: build a page-image directory and load it."""

    def build(n_pages: int, doc_id: str = "doc") -> DocumentRef:
        doc_dir = tmp_path / doc_id
        write_page_files(doc_dir, n_pages)
        return load_document(doc_dir)

    return build


@pytest.fixture
def default_cfg() -> PipelineConfig:
    return PipelineConfig()


def make_question(
    pages: set[int],
    text: str = "What changed between the reports?",
    mode: SourceMode = SourceMode.RANDOM,
) -> Question:
    if mode is SourceMode.RANDOM and len(pages) == 1:
        mode = SourceMode.SINGLE
    return Question(
        text=text,
        source_pages=frozenset(pages),
        source_mode=mode,
        question_type="reasoning",
    )


def make_ranked(
    entries: list[tuple[int, str, float]],
    *,
    k_limit: int = 24,
    threshold: float = 1.0,
) -> RankedEvidence:
    records = tuple(
        EvidenceRecord(page_index=page, snippet=snippet, score=score)
        for page, snippet, score in entries
    )
    return RankedEvidence(entries=records, k_limit=k_limit, threshold=threshold)


def random_records(
    rng: random.Random, n_pages: int, *, score_max: float = 10.0
) -> list[EvidenceRecord]:
    return [
        EvidenceRecord(
            page_index=i,
            snippet=f"snippet-{i}",
            score=round(rng.uniform(0.0, score_max), 1),
        )
        for i in range(1, n_pages + 1)
    ]


# --- checkpoint fixtures (written with the official safetensors library so the
#     package's own container reader is cross-validated against it) ---


def save_sharded_checkpoint(root: Path, shards: dict[str, dict[str, np.ndarray]]) -> Path:
    from safetensors.numpy import save_file

    root.mkdir(parents=True, exist_ok=True)
    weight_map: dict[str, str] = {}
    total = 0
    for shard_name, tensors in shards.items():
        save_file(tensors, root / shard_name)
        for name, arr in tensors.items():
            weight_map[name] = shard_name
            total += arr.nbytes
    index = {"metadata": {"total_size": total}, "weight_map": weight_map}
    (root / "model.safetensors.index.json").write_text(json.dumps(index, indent=2))
    return root


def save_single_checkpoint(path: Path, tensors: dict[str, np.ndarray]) -> Path:
    from safetensors.numpy import save_file

    path.parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, path)
    return path


def random_tensors(
    rng: np.random.Generator,
    names: list[str],
    dtype=np.float16,
    size: int = 64,
) -> dict[str, np.ndarray]:
    return {
        name: rng.standard_normal(size).astype(dtype) for name in names
    }
