"""Chat-completion backends and the bounded-parallelism batch orchestrator.

Two backends speak the same interface: ``HttpBackend`` talks to any
OpenAI-compatible ``/chat/completions`` endpoint, and ``ScriptedBackend``
replays canned responses keyed by request fingerprint, which keeps every
pipeline stage testable and byte-for-byte reproducible offline.
"""

from __future__ import annotations

import base64
import json
import os
import random
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import httpx

from .chat import (
    ChatRequest,
    ChatResponse,
    FinishReason,
    RetryPolicy,
    TextPart,
    request_fingerprint,
)
from .errors import ExhaustedRetries, MalformedResponse

_MIME_BY_SUFFIX = {
    ".png": "image/png",
    ".jpg": "image/jpeg",
    ".jpeg": "image/jpeg",
    ".webp": "image/webp",
    ".gif": "image/gif",
    ".bmp": "image/bmp",
}


class HttpStatusError(Exception):
    """Non-200 reply from the serving endpoint."""

    def __init__(self, status: int, body: str = ""):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status


class Backend(ABC):
    """A single-attempt chat completion provider.

    Implementations must be safe for concurrent calls up to the orchestrator's
    ``max_parallel``. Retries and parallelism live in :func:`complete` and
    :func:`complete_batch`, not here.
    """

    @abstractmethod
    def complete_once(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError


def complete(
    backend: Backend,
    request: ChatRequest,
    policy: RetryPolicy = RetryPolicy(),
    *,
    sleep: Callable[[float], None] = time.sleep,
    rng: random.Random | None = None,
) -> ChatResponse:
    """Run one request with retries and exponential full-jitter backoff.

    Every failure except a malformed 200 payload is retried up to
    ``policy.max_attempts``; truncated (finish_reason=length) responses are
    returned as-is for downstream parsers to judge.
    """
    rng = rng if rng is not None else random.Random()
    last_error: Exception | None = None
    for attempt in range(policy.max_attempts):
        try:
            return backend.complete_once(request)
        except MalformedResponse:
            raise
        except Exception as exc:
            last_error = exc
            if attempt + 1 < policy.max_attempts:
                cap = min(policy.max_backoff, policy.base_backoff * (2**attempt))
                sleep(rng.uniform(0.0, cap))
    raise ExhaustedRetries(
        f"request failed after {policy.max_attempts} attempts: {last_error}",
        last_error,
    )


def complete_batch(
    backend: Backend,
    requests: Sequence[ChatRequest],
    policy: RetryPolicy = RetryPolicy(),
    *,
    sleep: Callable[[float], None] = time.sleep,
) -> list[ChatResponse | Exception]:
    """Run many requests with at most ``policy.max_parallel`` in flight.

    The output list lines up with the input order regardless of completion
    order; a failed item carries its exception instead of aborting the batch.
    """
    results: list[ChatResponse | Exception] = [None] * len(requests)  # type: ignore[list-item]
    if not requests:
        return results
    with ThreadPoolExecutor(max_workers=policy.max_parallel) as pool:
        futures = {
            pool.submit(complete, backend, req, policy, sleep=sleep): i
            for i, req in enumerate(requests)
        }
        for future in as_completed(futures):
            index = futures[future]
            try:
                results[index] = future.result()
            except Exception as exc:
                results[index] = exc
    return results


# --------------------------------------------------------------------------- #
# OpenAI-compatible HTTP backend
# --------------------------------------------------------------------------- #


def wire_request(request: ChatRequest) -> dict[str, Any]:
    """Serialize to the OpenAI chat JSON; images become base64 data URLs."""
    messages = []
    for message in request.messages:
        if not message.image_parts():
            content: Any = message.text()
        else:
            content = []
            for part in message.parts:
                if isinstance(part, TextPart):
                    content.append({"type": "text", "text": part.text})
                else:
                    suffix = Path(part.page.image_path).suffix.lower()
                    mime = _MIME_BY_SUFFIX.get(suffix, "application/octet-stream")
                    data = base64.b64encode(part.page.read_bytes()).decode("ascii")
                    content.append(
                        {
                            "type": "image_url",
                            "image_url": {"url": f"data:{mime};base64,{data}"},
                        }
                    )
        messages.append({"role": message.role.value, "content": content})
    return {
        "model": request.model_id,
        "messages": messages,
        "max_tokens": request.max_tokens,
        "temperature": request.temperature,
    }


def parse_wire_response(data: Any, request: ChatRequest) -> ChatResponse:
    try:
        choice = data["choices"][0]
        content = choice["message"]["content"]
        raw_reason = choice.get("finish_reason", "stop")
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"payload does not follow the chat schema: {exc!r}")
    if content is None:
        content = ""
    if not isinstance(content, str):
        raise MalformedResponse(f"message content is not text: {type(content).__name__}")

    if raw_reason == "stop":
        reason = FinishReason.STOP
    elif raw_reason == "length":
        reason = FinishReason.LENGTH
    else:
        reason = FinishReason.ERROR

    usage = data.get("usage") or {}
    tokens = usage.get("completion_tokens")
    if tokens is None:
        # Servers that omit usage: trust the finish reason.
        tokens = request.max_tokens if reason is FinishReason.LENGTH else 0
    elif not isinstance(tokens, int) or tokens < 0:
        raise MalformedResponse(f"bad completion_tokens: {tokens!r}")
    elif reason is FinishReason.LENGTH and tokens != request.max_tokens:
        raise MalformedResponse(
            f"finish_reason=length but completion_tokens {tokens} != "
            f"max_tokens {request.max_tokens}"
        )
    return ChatResponse(text=content, completion_tokens=tokens, finish_reason=reason)


class HttpBackend(Backend):
    """Client for an OpenAI-compatible serving endpoint.

    The auth token is read from the environment variable named by
    ``auth_env`` at construction time; no token means no Authorization header.
    """

    def __init__(
        self,
        endpoint: str,
        *,
        auth_env: str = "DOCTRACE_API_TOKEN",
        timeout: float = 120.0,
        client: httpx.Client | None = None,
    ):
        self._url = endpoint.rstrip("/") + "/chat/completions"
        self._headers = {"Content-Type": "application/json"}
        token = os.environ.get(auth_env, "").strip()
        if token:
            self._headers["Authorization"] = f"Bearer {token}"
        self._client = client if client is not None else httpx.Client(timeout=timeout)

    def complete_once(self, request: ChatRequest) -> ChatResponse:
        response = self._client.post(self._url, json=wire_request(request), headers=self._headers)
        if response.status_code != 200:
            raise HttpStatusError(response.status_code, response.text)
        try:
            data = response.json()
        except (json.JSONDecodeError, ValueError):
            raise MalformedResponse("response body is not JSON")
        return parse_wire_response(data, request)


# --------------------------------------------------------------------------- #
# Scripted backend
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ScriptStep:
    """One scripted reply: either a response payload or an HTTP-style failure."""

    text: str | None = None
    finish_reason: FinishReason = FinishReason.STOP
    completion_tokens: int | None = None
    status: int | None = None  # when set, the step raises HttpStatusError
    latency: float = 0.0

    @classmethod
    def from_json(cls, raw: dict[str, Any]) -> "ScriptStep":
        return cls(
            text=raw.get("text"),
            finish_reason=FinishReason(raw.get("finish_reason", "stop")),
            completion_tokens=raw.get("completion_tokens"),
            status=raw.get("status"),
            latency=float(raw.get("latency", 0.0)),
        )


def synthesize_response(request: ChatRequest) -> str:
    """Deterministic stand-in reply derived from the request fingerprint.

    Recognizes the shipped prompt templates well enough to keep a full
    pipeline run flowing: extraction prompts get a parseable
    ``RELEVANCE``/``EVIDENCE`` reply (source pages land in the guided band),
    question prompts get a question, everything else gets a short answer.
    """
    fingerprint = request_fingerprint(request)
    seed = int(fingerprint[:12], 16)
    text = request.text()
    if "RELEVANCE:" in text:
        if "source pages" in text:
            score = 6.0 + (seed % 41) / 10.0
        else:
            score = (seed % 101) / 10.0
        return f"RELEVANCE: {score:.1f}\nEVIDENCE: Synthetic evidence {fingerprint[:10]}."
    if "question text only" in text:
        return f"What does the document report about item {fingerprint[:8]}?"
    return f"Synthetic answer citing {fingerprint[:8]}."


class ScriptedBackend(Backend):
    """Deterministic backend replaying fingerprint-keyed scripted responses.

    ``entries`` maps a request fingerprint to a list of steps consumed one
    per call (the last step repeats once exhausted). Unmatched requests use
    the fallback: ``"synthetic"`` derives a deterministic reply from the
    fingerprint, ``"error"`` raises a scripted HTTP 500.

    The backend doubles as a concurrency probe: ``max_in_flight`` records the
    highest number of overlapping calls observed.
    """

    def __init__(
        self,
        entries: dict[str, list[ScriptStep]] | None = None,
        *,
        fallback: str = "synthetic",
        synthesizer: Callable[[ChatRequest], str] = synthesize_response,
        latency: float = 0.0,
        record_requests: bool = False,
    ):
        if fallback not in ("synthetic", "error"):
            raise ValueError(f"fallback must be 'synthetic' or 'error', got {fallback!r}")
        self._entries = {k: list(v) for k, v in (entries or {}).items()}
        self._fallback = fallback
        self._synthesizer = synthesizer
        self._latency = latency
        self._record = record_requests
        self.recorded: list[tuple[str, ChatRequest]] = []
        self._lock = threading.Lock()
        self._cursor: dict[str, int] = {}
        self._in_flight = 0
        self.max_in_flight = 0
        self.calls_total = 0

    @classmethod
    def from_file(cls, path: str | Path, **kwargs: Any) -> "ScriptedBackend":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        entries: dict[str, list[ScriptStep]] = {}
        for fingerprint, steps in raw.get("entries", {}).items():
            if isinstance(steps, dict):
                steps = [steps]
            entries[fingerprint] = [ScriptStep.from_json(s) for s in steps]
        kwargs.setdefault("fallback", raw.get("fallback", "synthetic"))
        kwargs.setdefault("latency", float(raw.get("latency", 0.0)))
        return cls(entries, **kwargs)

    def _next_step(self, fingerprint: str) -> ScriptStep | None:
        steps = self._entries.get(fingerprint)
        if not steps:
            return None
        cursor = self._cursor.get(fingerprint, 0)
        self._cursor[fingerprint] = cursor + 1
        return steps[min(cursor, len(steps) - 1)]

    def complete_once(self, request: ChatRequest) -> ChatResponse:
        fingerprint = request_fingerprint(request)
        with self._lock:
            self.calls_total += 1
            self._in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self._in_flight)
            step = self._next_step(fingerprint)
            if self._record:
                self.recorded.append((fingerprint, request))
        try:
            latency = step.latency if step is not None and step.latency else self._latency
            if latency:
                time.sleep(latency)
            if step is None:
                if self._fallback == "error":
                    raise HttpStatusError(500, f"no scripted entry for {fingerprint}")
                text = self._synthesizer(request)
                return ChatResponse(text=text, completion_tokens=len(text.split()))
            if step.status is not None:
                raise HttpStatusError(step.status, "scripted failure")
            text = step.text if step.text is not None else ""
            tokens = step.completion_tokens
            if tokens is None:
                tokens = request.max_tokens if step.finish_reason is FinishReason.LENGTH else len(text.split())
            return ChatResponse(
                text=text, completion_tokens=tokens, finish_reason=step.finish_reason
            )
        finally:
            with self._lock:
                self._in_flight -= 1
