"""Exception hierarchy shared across the pipeline, merge, and stats tools."""

from __future__ import annotations


class DoctraceError(Exception):
    """Base class for all errors raised by this package."""


# --- document loading ---

class MissingDirectory(DoctraceError):
    pass


class NonContiguousPageNumbers(DoctraceError):
    pass


class EmptyDocument(DoctraceError):
    pass


class EmptyPageFile(DoctraceError):
    """A page image file is missing or has zero bytes."""


# --- configuration ---

class ConfigError(DoctraceError):
    pass


class InvalidRange(ConfigError):
    pass


class InconsistentBounds(ConfigError):
    pass


class UnknownConfigKey(ConfigError):
    pass


# --- chat backends ---

class BackendError(DoctraceError):
    pass


class ExhaustedRetries(BackendError):
    """All retry attempts failed; carries the last underlying error."""

    def __init__(self, message: str, last_error: Exception | None = None):
        super().__init__(message)
        self.last_error = last_error


class MalformedResponse(BackendError):
    """The server replied 200 with a payload that does not follow the chat schema."""


# --- question generation ---

class SpanTooLarge(DoctraceError):
    pass


class BackendFailure(DoctraceError):
    """A generation step failed after the backend exhausted its retries."""

    def __init__(self, message: str, cause: Exception | None = None):
        super().__init__(message)
        self.cause = cause


class EmptyGeneration(DoctraceError):
    pass


# --- evidence extraction ---

class UnparseableScore(DoctraceError):
    pass


# --- answer generation ---

class NoEvidence(DoctraceError):
    pass


# --- training examples / datasets ---

class MalformedThinkBlock(DoctraceError):
    pass


class MalformedLine(DoctraceError):
    def __init__(self, line_number: int, message: str = ""):
        detail = f"line {line_number}" + (f": {message}" if message else "")
        super().__init__(detail)
        self.line_number = line_number


class SourceTooSmall(DoctraceError):
    pass


# --- checkpoint merging ---

class IncompatibleStores(DoctraceError):
    pass


class IoFailure(DoctraceError):
    pass


# --- score aggregation ---

class EvalStatsError(DoctraceError):
    pass


class EmptyColumn(EvalStatsError):
    pass


class NonPositiveMax(EvalStatsError):
    pass


class MissingScore(EvalStatsError):
    pass


class UnknownBase(EvalStatsError):
    pass


class AxisMismatch(EvalStatsError):
    pass
