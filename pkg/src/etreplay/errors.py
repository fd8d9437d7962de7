"""Shared exception types for the etreplay toolkit."""

from __future__ import annotations


class ETReplayError(Exception):
    """Base class for all errors raised by this package."""


class MalformedDocument(ETReplayError):
    """An input file is not syntactically or structurally valid."""


class VersionMismatch(ETReplayError):
    """A versioned document was produced by an incompatible writer."""
