"""Exception hierarchy shared across the package."""

from __future__ import annotations


class GuidesegError(Exception):
    """Base class for all errors raised by guideseg."""


class ValidationError(GuidesegError, ValueError):
    """Invalid input value or configuration."""


class BoundsError(ValidationError):
    """A box or point lies outside the image it is meant to address."""


class ShapeError(ValidationError):
    """Operands have incompatible dimensions."""


class EmptyResultError(ValidationError):
    """An operation would produce an empty geometric result."""


class IngestError(ValidationError):
    """A guideline corpus could not be ingested."""


class EmptyCorpusError(IngestError):
    pass


class ProtocolError(GuidesegError):
    """An agent message could not be parsed.

    ``raw`` keeps the offending text so it can be written to the run trace.
    """

    def __init__(self, message: str, raw: str | None = None) -> None:
        super().__init__(message)
        self.raw = raw


class BackendError(GuidesegError):
    """A model backend call failed."""


class EmbedderError(GuidesegError):
    def __init__(self, message: str, guideline_id: str | None = None) -> None:
        super().__init__(message)
        self.guideline_id = guideline_id


class FormatError(GuidesegError):
    """A persisted file has the wrong version or structure."""
