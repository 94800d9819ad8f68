"""Document ingestion and the shared domain types built on page-image directories.

A document is a directory of pre-rasterized page images following the
``page_0001.png`` naming convention (zero-padded, 1-indexed). Images are
treated as opaque bytes; no decoding or resizing happens here.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import (
    EmptyDocument,
    EmptyPageFile,
    MissingDirectory,
    NonContiguousPageNumbers,
)

# Writers zero-pad to 4 digits so lexicographic = numeric order; the reader
# accepts any digit count and sorts numerically.
PAGE_FILE_RE = re.compile(r"^page_(\d+)\.(png|jpg|jpeg|webp|gif|bmp)$", re.IGNORECASE)


@dataclass(frozen=True)
class PageImage:
    """One page of a document, referenced by path rather than inlined bytes."""

    index: int  # 1-based position in the document
    image_path: str
    byte_len: int

    def read_bytes(self) -> bytes:
        return Path(self.image_path).read_bytes()


@dataclass(frozen=True)
class DocumentRef:
    doc_id: str
    pages: tuple[PageImage, ...]
    page_count: int = field(default=0)

    def __post_init__(self):
        if self.page_count == 0:
            object.__setattr__(self, "page_count", len(self.pages))
        if self.page_count != len(self.pages):
            raise ValueError(
                f"page_count {self.page_count} != number of pages {len(self.pages)}"
            )
        indices = [p.index for p in self.pages]
        if indices != list(range(1, len(indices) + 1)):
            raise ValueError(f"pages of {self.doc_id!r} are not numbered 1..N: {indices}")

    def page(self, index: int) -> PageImage:
        """Look up a page by its 1-based index."""
        if not 1 <= index <= self.page_count:
            raise IndexError(f"page {index} out of range 1..{self.page_count}")
        return self.pages[index - 1]


class SourceMode(str, Enum):
    SINGLE = "single"
    CONTIGUOUS = "contiguous"
    RANDOM = "random"


@dataclass(frozen=True)
class Question:
    text: str
    source_pages: frozenset[int]
    source_mode: SourceMode
    question_type: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("question text is empty")
        if not self.source_pages:
            raise ValueError("source_pages is empty")
        if any(p < 1 for p in self.source_pages):
            raise ValueError(f"source pages must be 1-based: {sorted(self.source_pages)}")
        if self.source_mode is SourceMode.CONTIGUOUS:
            pages = sorted(self.source_pages)
            if pages != list(range(pages[0], pages[0] + len(pages))):
                raise ValueError(f"contiguous mode requires an unbroken run, got {pages}")

    def validate_for(self, doc: DocumentRef) -> None:
        bad = [p for p in self.source_pages if p > doc.page_count]
        if bad:
            raise ValueError(
                f"source pages {bad} exceed page_count {doc.page_count} of {doc.doc_id!r}"
            )


def load_document(directory: str | Path) -> DocumentRef:
    """Load a page-image directory into a DocumentRef.

    Files that do not match the page naming pattern are ignored. Page numbers
    must form a gap-free, duplicate-free run starting at 1.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingDirectory(str(directory))

    numbered: dict[int, Path] = {}
    for entry in sorted(directory.iterdir()):
        m = PAGE_FILE_RE.match(entry.name)
        if m is None:
            continue
        index = int(m.group(1))
        if index in numbered:
            raise NonContiguousPageNumbers(
                f"{directory}: duplicate page number {index} "
                f"({numbered[index].name} and {entry.name})"
            )
        numbered[index] = entry

    if not numbered:
        raise EmptyDocument(str(directory))

    indices = sorted(numbered)
    expected = list(range(1, len(indices) + 1))
    if indices != expected:
        missing = sorted(set(expected) - set(indices))
        raise NonContiguousPageNumbers(
            f"{directory}: page numbers {indices} do not form 1..{len(indices)}"
            + (f" (missing {missing})" if missing else "")
        )

    pages = []
    for index in indices:
        path = numbered[index]
        size = path.stat().st_size
        if size == 0:
            raise EmptyPageFile(str(path))
        pages.append(PageImage(index=index, image_path=str(path), byte_len=size))

    return DocumentRef(doc_id=directory.name, pages=tuple(pages))
