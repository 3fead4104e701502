"""Exception hierarchy shared across the package."""

from __future__ import annotations


class StepGapError(Exception):
    """Base class for all package errors."""


class MalformedTrace(StepGapError, ValueError):
    """Generator output cannot be segmented into steps."""


class IndexOutOfRange(StepGapError, IndexError):
    pass


class JudgeUnavailable(StepGapError):
    """A judge backend failed after exhausting its retries."""


class SchemaViolation(StepGapError, ValueError):
    """A judge response does not conform to the structured-output schema."""


class CalibrationFailed(StepGapError):
    pass


class ScriptExhausted(StepGapError, LookupError):
    """No entry of a scripted backend matches the request."""


class CacheCorrupt(StepGapError):
    pass


class MissingVerdict(StepGapError, ValueError):
    pass


class MissingTokenSpan(StepGapError, ValueError):
    pass


class EmptyInput(StepGapError, ValueError):
    pass


class UnknownCorrectness(StepGapError, KeyError):
    pass


class DomainError(StepGapError, ValueError):
    pass


class InsufficientQuestions(StepGapError, ValueError):
    pass


class ConfigError(StepGapError, ValueError):
    pass


class MalformedRecord(StepGapError, ValueError):
    """A line of an input file is not a valid record."""
