"""Exception hierarchy shared across the package."""

from __future__ import annotations


class AfaError(Exception):
    """Base class for all errors raised by this package."""


class DimMismatch(AfaError, ValueError):
    pass


class DegenerateVector(AfaError, ValueError):
    pass


class DuplicateEnrollment(AfaError):
    pass


class InsufficientSamples(AfaError, ValueError):
    pass


class OutOfOrderTurn(AfaError, ValueError):
    pass


class RolloverFailed(AfaError):
    """The summarizer failed; the turn was stored and the window left intact."""


class CorruptStore(AfaError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class ExtractionFailed(AfaError):
    pass


class EmbedUnavailable(AfaError):
    pass


class BackendUnavailable(AfaError):
    def __init__(self, message: str, attempts: int = 0):
        self.attempts = attempts
        super().__init__(f"{message} after {attempts} attempt(s)")


class ScriptMiss(AfaError, KeyError):
    def __str__(self) -> str:  # KeyError would repr() the message
        return str(self.args[0]) if self.args else "script miss"


class UndefinedCoverage(AfaError, ValueError):
    pass


class UndefinedMetric(AfaError, ValueError):
    pass


class IngestAborted(AfaError):
    pass


class InsufficientData(AfaError, ValueError):
    pass
