"""Chat message, request, and response types shared by all backends."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .core import PageImage


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    page: PageImage


Part = TextPart | ImagePart


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    parts: tuple[Part, ...]

    def __post_init__(self):
        if not self.parts:
            raise ValueError("message has no parts")
        if self.role is not Role.USER and any(isinstance(p, ImagePart) for p in self.parts):
            raise ValueError(f"image parts are only allowed in user messages, not {self.role.value}")

    def text(self) -> str:
        """All text content of the message, joined in order."""
        return "\n".join(p.text for p in self.parts if isinstance(p, TextPart))

    def image_parts(self) -> list[ImagePart]:
        return [p for p in self.parts if isinstance(p, ImagePart)]


def text_message(role: Role, text: str) -> ChatMessage:
    return ChatMessage(role=role, parts=(TextPart(text),))


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[ChatMessage, ...]
    max_tokens: int = 1024
    temperature: float = 0.0

    def __post_init__(self):
        if not self.messages:
            raise ValueError("request has no messages")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be positive, got {self.max_tokens}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")

    def text(self) -> str:
        return "\n".join(m.text() for m in self.messages)

    def image_parts(self) -> list[ImagePart]:
        return [p for m in self.messages for p in m.image_parts()]


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH = "length"
    ERROR = "error"


@dataclass(frozen=True)
class ChatResponse:
    text: str
    completion_tokens: int = 0
    finish_reason: FinishReason = FinishReason.STOP

    def __post_init__(self):
        if self.completion_tokens < 0:
            raise ValueError("completion_tokens must be non-negative")


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    base_backoff: float = 0.5  # seconds
    max_backoff: float = 60.0
    max_parallel: int = 8

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")


_IMAGE_HASHES: dict[tuple[str, int], str] = {}


def _image_digest(page: PageImage) -> str:
    key = (page.image_path, page.byte_len)
    cached = _IMAGE_HASHES.get(key)
    if cached is None:
        cached = hashlib.sha256(Path(page.image_path).read_bytes()).hexdigest()
        _IMAGE_HASHES[key] = cached
    return cached


def request_fingerprint(request: ChatRequest) -> str:
    """Stable content hash of a request; image bytes are hashed, not inlined.

    Two requests fingerprint identically iff their model, sampling settings,
    and full message content (including image bytes) agree.
    """
    payload = {
        "model": request.model_id,
        "max_tokens": request.max_tokens,
        "temperature": request.temperature,
        "messages": [
            {
                "role": m.role.value,
                "parts": [
                    {"text": p.text}
                    if isinstance(p, TextPart)
                    else {"image_sha256": _image_digest(p.page), "page_index": p.page.index}
                    for p in m.parts
                ],
            }
            for m in request.messages
        ],
    }
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
