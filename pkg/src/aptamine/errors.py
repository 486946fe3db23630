"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations


class AptamineError(Exception):
    """Base class for all errors raised by aptamine."""


class ConfigError(AptamineError):
    pass


class EmptyTarget(AptamineError, ValueError):
    pass


class InvalidUrl(AptamineError, ValueError):
    pass


class NetworkError(AptamineError):
    def __init__(self, message: str, attempts: int = 0, status: int | None = None) -> None:
        super().__init__(message)
        self.attempts = attempts
        self.status = status


class MalformedResponse(AptamineError):
    pass


class XmlSyntaxError(AptamineError):
    pass


class EmptyBody(AptamineError):
    pass


class UnsupportedFormat(AptamineError):
    pass


class ConversionFailed(AptamineError):
    pass


class EmptyQuery(AptamineError, ValueError):
    pass


class UnparseableDecoration(AptamineError, ValueError):
    pass


class UnknownTemplate(AptamineError, KeyError):
    pass


class MissingPlaceholder(AptamineError, ValueError):
    pass


class ParseFailure(AptamineError, ValueError):
    pass


class EmptySequence(AptamineError, ValueError):
    pass


class StorageError(AptamineError):
    pass


class EmptyRun(AptamineError, ValueError):
    pass


class ReportIOError(AptamineError, OSError):
    pass
