"""Pixel-space boxes, binary masks and crop regions.

Boxes are half-open ``[min, max)`` integer rectangles with the origin at the
top-left corner, stored in the ``[y_min, x_min, y_max, x_max]`` order that the
agents speak on the wire.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import BoundsError, EmptyResultError, ShapeError, ValidationError


@dataclass(frozen=True, slots=True)
class BoundingBox:
    y_min: int
    x_min: int
    y_max: int
    x_max: int

    def __post_init__(self) -> None:
        for name in ("y_min", "x_min", "y_max", "x_max"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ValidationError(f"box coordinate {name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.y_min < 0 or self.x_min < 0:
            raise BoundsError(f"negative box origin: {self.as_list()}")
        if self.y_min >= self.y_max or self.x_min >= self.x_max:
            raise ValidationError(f"degenerate box: {self.as_list()}")

    @classmethod
    def from_list(cls, coords: Sequence[Any]) -> BoundingBox:
        if len(coords) != 4:
            raise ValidationError(f"box_2d needs 4 coordinates, got {len(coords)}")
        return cls(*(int(c) for c in coords))

    @classmethod
    def clipped(
        cls, y_min: float, x_min: float, y_max: float, x_max: float, width: int, height: int
    ) -> BoundingBox | None:
        """Clamp raw (possibly out-of-range) coordinates; ``None`` if nothing is left."""
        y0 = min(max(int(np.floor(y_min)), 0), height)
        x0 = min(max(int(np.floor(x_min)), 0), width)
        y1 = min(max(int(np.ceil(y_max)), 0), height)
        x1 = min(max(int(np.ceil(x_max)), 0), width)
        if y1 <= y0 or x1 <= x0:
            return None
        return cls(y0, x0, y1, x1)

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def area(self) -> int:
        return self.height * self.width

    @property
    def center(self) -> tuple[float, float]:
        return ((self.y_min + self.y_max) / 2, (self.x_min + self.x_max) / 2)

    def as_list(self) -> list[int]:
        return [self.y_min, self.x_min, self.y_max, self.x_max]

    def within(self, width: int, height: int) -> bool:
        return self.y_max <= height and self.x_max <= width

    def contains(self, other: BoundingBox) -> bool:
        return (
            self.y_min <= other.y_min
            and self.x_min <= other.x_min
            and self.y_max >= other.y_max
            and self.x_max >= other.x_max
        )

    def contains_point(self, y: int, x: int) -> bool:
        return self.y_min <= y < self.y_max and self.x_min <= x < self.x_max

    def intersection(self, other: BoundingBox) -> BoundingBox | None:
        y0, x0 = max(self.y_min, other.y_min), max(self.x_min, other.x_min)
        y1, x1 = min(self.y_max, other.y_max), min(self.x_max, other.x_max)
        if y1 <= y0 or x1 <= x0:
            return None
        return BoundingBox(y0, x0, y1, x1)

    def iou(self, other: BoundingBox) -> float:
        inter = self.intersection(other)
        if inter is None:
            return 0.0
        i = inter.area
        return i / (self.area + other.area - i)

    def translate(self, dy: int, dx: int) -> BoundingBox:
        return BoundingBox(self.y_min + dy, self.x_min + dx, self.y_max + dy, self.x_max + dx)

    def clip(self, width: int, height: int) -> BoundingBox | None:
        return BoundingBox.clipped(self.y_min, self.x_min, self.y_max, self.x_max, width, height)

    def expand(self, frac: float, width: int, height: int) -> BoundingBox:
        """Grow by ``frac`` of the box size on every side, clamped to the image."""
        dy = self.height * frac
        dx = self.width * frac
        out = BoundingBox.clipped(
            self.y_min - dy, self.x_min - dx, self.y_max + dy, self.x_max + dx, width, height
        )
        if out is None:
            raise BoundsError(f"box {self.as_list()} lies outside {width}x{height}")
        return out

    def dilate(self, px: int, width: int, height: int) -> BoundingBox:
        out = BoundingBox.clipped(
            self.y_min - px, self.x_min - px, self.y_max + px, self.x_max + px, width, height
        )
        if out is None:
            raise BoundsError(f"box {self.as_list()} lies outside {width}x{height}")
        return out

    def erode(self, px: int) -> BoundingBox | None:
        y0, x0 = self.y_min + px, self.x_min + px
        y1, x1 = self.y_max - px, self.x_max - px
        if y1 <= y0 or x1 <= x0:
            return None
        return BoundingBox(y0, x0, y1, x1)


class BinaryMask:
    """Immutable ``height x width`` bit set backed by a read-only bool array."""

    __slots__ = ("_bits",)

    def __init__(self, bits: np.ndarray) -> None:
        arr = np.array(bits, dtype=bool, copy=True)
        if arr.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {arr.shape}")
        arr.flags.writeable = False
        self._bits = arr

    @classmethod
    def empty(cls, width: int, height: int) -> BinaryMask:
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> BinaryMask:
        # Skip the defensive copy for arrays created internally.
        out = cls.__new__(cls)
        arr.flags.writeable = False
        out._bits = arr
        return out

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def width(self) -> int:
        return self._bits.shape[1]

    @property
    def height(self) -> int:
        return self._bits.shape[0]

    @property
    def popcount(self) -> int:
        return int(np.count_nonzero(self._bits))

    def _check(self, other: BinaryMask) -> None:
        if self._bits.shape != other._bits.shape:
            raise ShapeError(
                f"mask dimensions differ: {self.width}x{self.height} vs {other.width}x{other.height}"
            )

    def union(self, other: BinaryMask) -> BinaryMask:
        self._check(other)
        return BinaryMask._wrap(self._bits | other._bits)

    def intersection(self, other: BinaryMask) -> BinaryMask:
        self._check(other)
        return BinaryMask._wrap(self._bits & other._bits)

    def difference(self, other: BinaryMask) -> BinaryMask:
        self._check(other)
        return BinaryMask._wrap(self._bits & ~other._bits)

    def issubset(self, other: BinaryMask) -> bool:
        self._check(other)
        return not bool(np.any(self._bits & ~other._bits))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self._bits.shape == other._bits.shape and bool(np.array_equal(self._bits, other._bits))

    def __hash__(self) -> int:
        return hash((self._bits.shape, self._bits.tobytes()))

    def __repr__(self) -> str:
        return f"BinaryMask({self.width}x{self.height}, popcount={self.popcount})"

    def to_rle(self) -> dict[str, Any]:
        """Row-major run lengths, alternating 0-runs and 1-runs, starting with 0."""
        flat = self._bits.ravel().astype(np.int8)
        if flat.size == 0:
            return {"width": self.width, "height": self.height, "rle": []}
        change = np.flatnonzero(np.diff(flat)) + 1
        bounds = np.concatenate(([0], change, [flat.size]))
        runs = np.diff(bounds).tolist()
        if flat[0] == 1:
            runs.insert(0, 0)
        return {"width": self.width, "height": self.height, "rle": runs}

    @classmethod
    def from_rle(cls, record: dict[str, Any]) -> BinaryMask:
        try:
            width, height = int(record["width"]), int(record["height"])
            runs = [int(r) for r in record["rle"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed RLE mask record: {exc}") from exc
        if any(r < 0 for r in runs) or sum(runs) != width * height:
            raise ShapeError(f"RLE runs sum to {sum(runs)}, expected {width * height}")
        values = np.zeros(len(runs), dtype=bool)
        values[1::2] = True
        flat = np.repeat(values, runs)
        return cls._wrap(flat.reshape(height, width))


def rasterize(box: BoundingBox, width: int, height: int) -> BinaryMask:
    if not box.within(width, height):
        raise BoundsError(f"box {box.as_list()} exceeds image {width}x{height}")
    arr = np.zeros((height, width), dtype=bool)
    arr[box.y_min : box.y_max, box.x_min : box.x_max] = True
    return BinaryMask._wrap(arr)


def overlap_stats(a: BinaryMask, b: BinaryMask) -> tuple[int, int, int, int]:
    """Return ``(intersection_px, union_px, a_px, b_px)``."""
    if a.bits.shape != b.bits.shape:
        raise ShapeError(f"mask dimensions differ: {a.bits.shape} vs {b.bits.shape}")
    a_px = a.popcount
    b_px = b.popcount
    inter = int(np.count_nonzero(a.bits & b.bits))
    return inter, a_px + b_px - inter, a_px, b_px


def union_all(masks: Iterable[BinaryMask], width: int, height: int) -> BinaryMask:
    arr = np.zeros((height, width), dtype=bool)
    for m in masks:
        if m.bits.shape != arr.shape:
            raise ShapeError(f"mask dimensions differ: {m.bits.shape} vs {arr.shape}")
        arr |= m.bits
    return BinaryMask._wrap(arr)


@dataclass(frozen=True, slots=True)
class CropRegion:
    """A rectangular window into a parent image."""

    parent_width: int
    parent_height: int
    box: BoundingBox

    def __post_init__(self) -> None:
        if not self.box.within(self.parent_width, self.parent_height):
            raise BoundsError(
                f"crop {self.box.as_list()} exceeds parent {self.parent_width}x{self.parent_height}"
            )

    @classmethod
    def full(cls, width: int, height: int) -> CropRegion:
        return cls(width, height, BoundingBox(0, 0, height, width))

    @property
    def width(self) -> int:
        return self.box.width

    @property
    def height(self) -> int:
        return self.box.height

    @property
    def is_full(self) -> bool:
        return self.box == BoundingBox(0, 0, self.parent_height, self.parent_width)

    def to_local(self, box: BoundingBox) -> BoundingBox:
        """Clip a parent-space box to the region and express it in crop coordinates."""
        inside = box.intersection(self.box)
        if inside is None:
            raise EmptyResultError(f"box {box.as_list()} does not intersect crop {self.box.as_list()}")
        return inside.translate(-self.box.y_min, -self.box.x_min)

    def to_parent(self, box: BoundingBox) -> BoundingBox:
        if not box.within(self.width, self.height):
            raise BoundsError(f"local box {box.as_list()} exceeds crop {self.width}x{self.height}")
        return box.translate(self.box.y_min, self.box.x_min)

    def mask_to_parent(self, mask: BinaryMask) -> BinaryMask:
        if (mask.width, mask.height) != (self.width, self.height):
            raise ShapeError("local mask does not match crop dimensions")
        arr = np.zeros((self.parent_height, self.parent_width), dtype=bool)
        b = self.box
        arr[b.y_min : b.y_max, b.x_min : b.x_max] = mask.bits
        return BinaryMask._wrap(arr)

    def to_dict(self) -> dict[str, Any]:
        return {
            "parent_width": self.parent_width,
            "parent_height": self.parent_height,
            "box_2d": self.box.as_list(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> CropRegion:
        return cls(int(data["parent_width"]), int(data["parent_height"]), BoundingBox.from_list(data["box_2d"]))
