"""Segmentation metrics over class masks, and per-call token/cost accounting."""

from __future__ import annotations

import csv
import io
import math
import statistics
import threading
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

from .errors import ShapeError, ValidationError
from .geometry import BinaryMask, overlap_stats


@dataclass(frozen=True)
class ImagePair:
    pred: BinaryMask
    gt: BinaryMask
    name: str = ""

    def __post_init__(self) -> None:
        if (self.pred.width, self.pred.height) != (self.gt.width, self.gt.height):
            raise ShapeError(f"pair {self.name!r}: prediction and ground truth differ in size")


@dataclass(frozen=True)
class ImageScore:
    name: str
    intersection: int
    union: int
    pred_px: int
    gt_px: int
    iou: float
    precision: float
    recall: float
    dice: float


@dataclass(frozen=True)
class MetricReport:
    gIoU: float
    cIoU: float
    mPr: float
    mRec: float
    mDice: float
    per_image: tuple[ImageScore, ...]

    def summary(self) -> dict[str, float]:
        return {"gIoU": self.gIoU, "cIoU": self.cIoU, "mPr": self.mPr, "mRec": self.mRec, "mDice": self.mDice}

    def to_dict(self) -> dict[str, Any]:
        return {**self.summary(), "per_image": [asdict(s) for s in self.per_image]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["name", "intersection", "union", "pred_px", "gt_px", "iou", "precision", "recall", "dice"]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for s in self.per_image:
            writer.writerow([getattr(s, c) for c in cols])
        total_i = sum(s.intersection for s in self.per_image)
        total_u = sum(s.union for s in self.per_image)
        writer.writerow(["__summary__", total_i, total_u, "", "", self.gIoU, self.mPr, self.mRec, self.mDice])
        writer.writerow(["__cIoU__", "", "", "", "", self.cIoU, "", "", ""])
        return buf.getvalue()


def _ratio(num: int, den: int, empty: float) -> float:
    return num / den if den else empty


def score_pair(pair: ImagePair) -> ImageScore:
    inter, union, p, g = overlap_stats(pair.pred, pair.gt)
    # Empty prediction on empty ground truth is a perfect answer.
    iou = _ratio(inter, union, 1.0)
    precision = inter / p if p else (1.0 if g == 0 else 0.0)
    recall = inter / g if g else (1.0 if p == 0 else 0.0)
    dice = _ratio(2 * inter, p + g, 1.0)
    return ImageScore(pair.name, inter, union, p, g, iou, precision, recall, dice)


def evaluate(pairs: Sequence[ImagePair]) -> MetricReport:
    if not pairs:
        raise ValidationError("cannot evaluate an empty dataset")
    scores = tuple(score_pair(p) for p in pairs)
    n = len(scores)
    total_i = sum(s.intersection for s in scores)
    total_u = sum(s.union for s in scores)
    return MetricReport(
        gIoU=math.fsum(s.iou for s in scores) / n,
        cIoU=_ratio(total_i, total_u, 1.0),
        mPr=math.fsum(s.precision for s in scores) / n,
        mRec=math.fsum(s.recall for s in scores) / n,
        mDice=math.fsum(s.dice for s in scores) / n,
        per_image=scores,
    )


# --------------------------------------------------------------------------- cost accounting

DEFAULT_INPUT_TOKENS = 2000
DEFAULT_OUTPUT_TOKENS = 200


@dataclass(frozen=True)
class PriceConfig:
    usd_per_m_input: float = 0.30
    usd_per_m_output: float = 2.50

    def call_cost(self, input_tokens: int, output_tokens: int) -> float:
        return input_tokens / 1e6 * self.usd_per_m_input + output_tokens / 1e6 * self.usd_per_m_output


@dataclass(frozen=True)
class LedgerEntry:
    role: str
    input_tokens: int
    output_tokens: int
    latency_ms: float
    ok: bool = True

    def __post_init__(self) -> None:
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValidationError("token counts must be non-negative")


@dataclass
class CostLedger:
    """Append-only record of model calls; safe for concurrent appends."""

    prices: PriceConfig = field(default_factory=PriceConfig)
    entries: list[LedgerEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._lock = threading.Lock()

    def record(self, role: str, input_tokens: int, output_tokens: int, latency_ms: float, ok: bool = True) -> LedgerEntry:
        entry = LedgerEntry(role, int(input_tokens), int(output_tokens), float(latency_ms), ok)
        with self._lock:
            self.entries.append(entry)
        return entry

    def __len__(self) -> int:
        return len(self.entries)

    def to_dict(self) -> dict[str, Any]:
        return {"prices": asdict(self.prices), "entries": [asdict(e) for e in self.entries]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> CostLedger:
        ledger = cls(PriceConfig(**data.get("prices", {})))
        for e in data.get("entries", []):
            ledger.record(e["role"], e["input_tokens"], e["output_tokens"], e["latency_ms"], e.get("ok", True))
        return ledger


def cost_total(ledger: CostLedger) -> float:
    return math.fsum(ledger.prices.call_cost(e.input_tokens, e.output_tokens) for e in ledger.entries)


def expected_cost(
    iterations: float,
    calls_per_iteration: int = 3,
    input_tokens: int = DEFAULT_INPUT_TOKENS,
    output_tokens: int = DEFAULT_OUTPUT_TOKENS,
    prices: PriceConfig = PriceConfig(),
) -> float:
    """Cost of a run made of identical calls; ``iterations`` may be a fractional average."""
    return iterations * calls_per_iteration * prices.call_cost(input_tokens, output_tokens)


def ledger_summary(ledger: CostLedger) -> dict[str, Any]:
    entries = list(ledger.entries)
    latencies = [e.latency_ms for e in entries]
    by_role: dict[str, int] = {}
    for e in entries:
        by_role[e.role] = by_role.get(e.role, 0) + 1
    return {
        "calls": len(entries),
        "failed_calls": sum(1 for e in entries if not e.ok),
        "input_tokens": sum(e.input_tokens for e in entries),
        "output_tokens": sum(e.output_tokens for e in entries),
        "median_latency_ms": statistics.median(latencies) if latencies else 0,
        "cost_usd": cost_total(ledger),
        "calls_by_role": by_role,
    }
