"""Exception hierarchy shared across the toolkit."""
from __future__ import annotations


class EdgeStressError(Exception):
    """Base class for every error raised by this package."""


class SpecError(EdgeStressError):
    """A problem located in DSL source text."""

    def __init__(self, message: str, span=None):
        self.message = message
        self.span = span
        where = f"{span}: " if span is not None else ""
        super().__init__(f"{where}{message}")


class LexError(SpecError):
    pass


class ParseError(SpecError):
    def __init__(self, message: str, span=None, expected=()):
        self.expected = frozenset(expected)
        super().__init__(message, span)


class MissingSimulator(ParseError):
    pass


class DuplicateSimulator(ParseError):
    pass


class ResolveError(EdgeStressError):
    pass


class ManifestError(EdgeStressError):
    pass


class TransportError(EdgeStressError):
    pass


class ConnectError(TransportError):
    pass


class SendError(TransportError):
    pass


class ReceiveError(TransportError):
    pass


class NodeError(EdgeStressError):
    pass


class LaunchError(EdgeStressError):
    pass


class NotSupported(LaunchError):
    pass


class CollectError(EdgeStressError):
    pass


class BindError(EdgeStressError):
    pass


class ClockDomainError(EdgeStressError):
    pass
