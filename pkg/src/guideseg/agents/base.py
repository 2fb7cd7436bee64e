"""Backend contracts shared by every agent role."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Protocol, runtime_checkable

from ..errors import BackendError, ValidationError
from ..geometry import BinaryMask, BoundingBox, CropRegion
from ..metrics import CostLedger
from ..protocol import SegmenterPrompt

log = logging.getLogger(__name__)

ROLES = ("worker", "supervisor_eval", "supervisor_boxgen", "captioner", "detector")


@dataclass(frozen=True)
class RoleConfig:
    role: str
    system_prompt: str
    temperature: float
    thinking_mode: bool = False
    response_schema: bool = False

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValidationError(f"unknown role {self.role!r}")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValidationError(f"{self.role}: temperature {self.temperature} outside [0, 2]")
        if self.response_schema and self.role != "supervisor_eval":
            raise ValidationError("only supervisor_eval runs with a response schema")


@dataclass(frozen=True)
class ImageView:
    """What an agent is shown: an opaque image handle seen through a crop.

    ``annotations`` carries the subject overlay (id, label, box) for the
    annotated view; ``scale`` is the resize factor applied before the model
    sees the crop (coarse detection runs downscaled).
    """

    handle: Any
    region: CropRegion
    annotations: tuple[tuple[str, str, BoundingBox], ...] = ()
    scale: float = 1.0

    @property
    def width(self) -> int:
        return self.region.width

    @property
    def height(self) -> int:
        return self.region.height

    @property
    def scaled_size(self) -> tuple[int, int]:
        """``(width, height)`` after applying ``scale``."""
        return max(1, round(self.width * self.scale)), max(1, round(self.height * self.scale))

    def annotated(self, annotations: tuple[tuple[str, str, BoundingBox], ...]) -> ImageView:
        return replace(self, annotations=annotations)

    def ref(self) -> str:
        return str(getattr(self.handle, "ref", self.handle))


@dataclass(frozen=True)
class BackendRequest:
    role: RoleConfig
    text: tuple[str, ...]
    images: tuple[ImageView, ...] = ()
    context: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class BackendResponse:
    text: str
    input_tokens: int = 0
    output_tokens: int = 0
    latency_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValidationError("token counts must be non-negative")


@runtime_checkable
class Backend(Protocol):
    def complete(self, request: BackendRequest) -> BackendResponse: ...


@runtime_checkable
class Segmenter(Protocol):
    def segment(self, image: ImageView, prompt: SegmenterPrompt) -> BinaryMask: ...


@runtime_checkable
class Scorer(Protocol):
    def score(self, image: ImageView, crop: BoundingBox, label: str) -> float:
        """Image-text match logit for ``label`` inside ``crop`` of ``image``."""
        ...


def call_backend(
    backend: Backend, request: BackendRequest, ledger: CostLedger, retries: int = 1
) -> BackendResponse:
    """Call ``backend`` with one retry on failure; every attempt is written to ``ledger``."""
    last: Exception | None = None
    for attempt in range(retries + 1):
        start = time.perf_counter()
        try:
            resp = backend.complete(request)
        except BackendError as exc:
            ledger.record(request.role.role, 0, 0, (time.perf_counter() - start) * 1e3, ok=False)
            log.warning("%s call failed (attempt %d): %s", request.role.role, attempt + 1, exc)
            last = exc
            continue
        ledger.record(request.role.role, resp.input_tokens, resp.output_tokens, resp.latency_ms)
        return resp
    raise BackendError(f"{request.role.role} failed after {retries + 1} attempts: {last}") from last
