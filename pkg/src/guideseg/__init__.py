"""Guideline-consistent segmentation with a supervised agent loop and an adaptive iteration controller."""

from .errors import (
    BackendError,
    BoundsError,
    EmbedderError,
    EmptyCorpusError,
    EmptyResultError,
    FormatError,
    GuidesegError,
    IngestError,
    ProtocolError,
    ShapeError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "BoundsError",
    "EmbedderError",
    "EmptyCorpusError",
    "EmptyResultError",
    "FormatError",
    "GuidesegError",
    "IngestError",
    "ProtocolError",
    "ShapeError",
    "ValidationError",
    "__version__",
]
