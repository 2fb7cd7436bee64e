"""Scene query construction, guideline retrieval and smart-crop planning."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Sequence

from .agents.base import Backend, BackendRequest, ImageView, RoleConfig, call_backend
from .agents.roles import render
from .errors import GuidesegError, ValidationError
from .geometry import BoundingBox, CropRegion
from .guidelines import Embedder, Guideline, GuidelineIndex, top_k
from .metrics import CostLedger
from .protocol import _as_object, extract_json

log = logging.getLogger(__name__)

DEFAULT_K = 8
DEFAULT_DOWNSCALE = 0.8


@dataclass(frozen=True)
class SceneQuery:
    prompt: str
    caption: str
    width: int
    height: int

    def __post_init__(self) -> None:
        if not self.prompt.strip():
            raise ValidationError("prompt must be non-empty")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("image dimensions must be positive")

    def render(self) -> str:
        return f"{self.prompt} | {self.caption} | {self.width}x{self.height}"


def build_query(prompt: str, caption: str, width: int, height: int) -> str:
    return SceneQuery(prompt, caption, width, height).render()


@dataclass(frozen=True)
class CropPlan:
    crops: tuple[CropRegion, ...]
    split_x: int | None = None
    balance: tuple[int, int] = (0, 0)
    gap_px: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "crops": [c.to_dict() for c in self.crops],
            "split_x": self.split_x,
            "balance": list(self.balance),
            "gap_px": self.gap_px,
        }


def plan_crops(boxes: Sequence[BoundingBox], width: int, height: int, margin: int = 0) -> CropPlan:
    """Choose a vertical split that balances box counts, then maximizes the empty gap.

    Boxes are ordered by x-center; every split between neighbours with a
    non-negative gap is a candidate, scored lexicographically by
    (|left - right|, -gap, left count). No feasible split, or fewer than two
    boxes, gives a single full-image crop.
    """
    full = CropRegion.full(width, height)
    n = len(boxes)
    if n < 2:
        return CropPlan((full,), None, (n, 0), 0)
    order = sorted(boxes, key=lambda b: (b.x_min + b.x_max, b.x_min, b.x_max))
    best: tuple[tuple[int, int, int], int, int, int] | None = None
    for i in range(1, n):
        left_max = max(b.x_max for b in order[:i])
        right_min = min(b.x_min for b in order[i:])
        gap = right_min - left_max
        if gap < 0:
            continue
        key = (abs(i - (n - i)), -gap, i)
        if best is None or key < best[0]:
            best = (key, i, left_max, right_min)
    if best is None:
        return CropPlan((full,), None, (n, 0), 0)
    _, i, left_max, right_min = best
    left = CropRegion(width, height, BoundingBox(0, 0, height, min(width, left_max + margin)))
    right = CropRegion(width, height, BoundingBox(0, max(0, right_min - margin), height, width))
    return CropPlan((left, right), (left_max + right_min) // 2, (i, n - i), right_min - left_max)


def downscale_box(box: BoundingBox, factor: float) -> BoundingBox:
    f = Fraction(str(factor))
    return BoundingBox(
        math.floor(box.y_min * f), math.floor(box.x_min * f),
        max(math.ceil(box.y_max * f), math.floor(box.y_min * f) + 1),
        max(math.ceil(box.x_max * f), math.floor(box.x_min * f) + 1),
    )


def upscale_box(box: BoundingBox, factor: float, width: int, height: int) -> BoundingBox | None:
    """Map a box found at ``factor`` resolution back to full-resolution pixels (outward rounding)."""
    f = Fraction(str(factor))
    return BoundingBox.clipped(
        math.floor(box.y_min / f), math.floor(box.x_min / f),
        math.ceil(box.y_max / f), math.ceil(box.x_max / f),
        width, height,
    )


@dataclass
class ContextResult:
    query: str
    caption: str
    retrieved: list[tuple[Guideline, float]]
    coarse_boxes: list[BoundingBox]
    plan: CropPlan
    warnings: list[str] = field(default_factory=list)

    @property
    def guidelines(self) -> list[Guideline]:
        return [g for g, _ in self.retrieved]

    def to_dict(self) -> dict[str, Any]:
        return {
            "query": self.query,
            "caption": self.caption,
            "retrieved": [{"id": g.id, "similarity": s} for g, s in self.retrieved],
            "coarse_boxes": [b.as_list() for b in self.coarse_boxes],
            "plan": self.plan.to_dict(),
            "warnings": list(self.warnings),
        }


def _caption(backend: Backend | None, view: ImageView, prompt: str, role: RoleConfig, ledger: CostLedger) -> str:
    if backend is None:
        return ""
    request = BackendRequest(role, (render(role.system_prompt, prompt),), (view,), {"prompt": prompt})
    return call_backend(backend, request, ledger).text.strip()


def _coarse(
    backend: Backend | None, view: ImageView, prompt: str, role: RoleConfig, ledger: CostLedger, factor: float
) -> list[BoundingBox]:
    if backend is None:
        return []
    small = ImageView(view.handle, view.region, scale=factor)
    request = BackendRequest(role, (render(role.system_prompt, prompt),), (small,), {"prompt": prompt})
    text = call_backend(backend, request, ledger).text
    data = _as_object(extract_json(text), text)
    sw, sh = small.scaled_size
    out = []
    for item in data.get("instances", []):
        raw = item.get("box_2d") if isinstance(item, dict) else None
        if not isinstance(raw, list) or len(raw) != 4:
            continue
        small_box = BoundingBox.clipped(*raw, sw, sh)
        if small_box is None:
            continue
        full_box = upscale_box(small_box, factor, view.width, view.height)
        if full_box is not None:
            out.append(full_box)
    return out


def construct_context(
    view: ImageView,
    prompt: str,
    index: GuidelineIndex,
    embedder: Embedder,
    roles: dict[str, RoleConfig],
    ledger: CostLedger,
    captioner: Backend | None = None,
    detector: Backend | None = None,
    k: int = DEFAULT_K,
    downscale: float = DEFAULT_DOWNSCALE,
    margin: int = 0,
) -> ContextResult:
    """Caption + retrieve + plan crops. Backend trouble degrades the context instead of raising."""
    warnings: list[str] = []
    with ThreadPoolExecutor(max_workers=2) as pool:
        cap_f = pool.submit(_caption, captioner, view, prompt, roles["captioner"], ledger)
        det_f = pool.submit(_coarse, detector, view, prompt, roles["detector"], ledger, downscale)
        try:
            caption = cap_f.result()
        except Exception as exc:  # noqa: BLE001 - context construction must not abort the run
            warnings.append(f"captioner unavailable, using prompt-only query: {exc}")
            caption = ""
        try:
            coarse = det_f.result()
        except Exception as exc:  # noqa: BLE001
            warnings.append(f"coarse detector unavailable, using the full image: {exc}")
            coarse = []

    query = build_query(prompt, caption, view.width, view.height)
    retrieved: list[tuple[Guideline, float]] = []
    try:
        retrieved = top_k(index, embedder.embed(query), k)
    except (GuidesegError, ValueError) as exc:
        warnings.append(f"guideline retrieval failed, continuing without rules: {exc}")
    plan = plan_crops(coarse, view.width, view.height, margin)
    for w in warnings:
        log.warning(w)
    return ContextResult(query, caption, retrieved, coarse, plan, warnings)
