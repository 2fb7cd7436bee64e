"""Synthetic scenes with known ground truth, distractors and planted defects."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Literal, Sequence

import numpy as np

from ..errors import ValidationError
from ..geometry import BinaryMask, BoundingBox, CropRegion, rasterize, union_all
from ..io import write_atomic

Density = Literal["few", "medium", "crowd"]
DENSITIES: tuple[Density, ...] = ("few", "medium", "crowd")

DEFAULT_WIDTH = 640
DEFAULT_HEIGHT = 480
PROMPT = "pedestrian"

# (label, guideline id) pairs. Included labels are what the prompt asks for
# under the bundled corpus; distractors look similar but are excluded.
INCLUDED = (
    ("pedestrian", "G0"),
    ("pedestrian", "G1"),
    ("skateboarder", "G2"),
    ("pedestrian with umbrella", "G6"),
    ("traffic officer", "G8"),
    ("wheelchair user", "G9"),
)
DISTRACTORS = (
    ("cyclist", "G4"),
    ("mannequin", "G5"),
    ("reflection", "G5"),
    ("vehicle occupant", "G7"),
)

OBJECT_COUNTS: dict[str, tuple[int, int]] = {"few": (1, 2), "medium": (3, 7), "crowd": (8, 15)}
DISTRACTOR_COUNTS: dict[str, tuple[int, int]] = {"few": (0, 1), "medium": (1, 2), "crowd": (2, 4)}
# (min h, max h, min w, max w). Even the smallest box keeps >= 95% of its area
# after the simulated segmenter's 1 px erosion.
SIZES: dict[str, tuple[int, int, int, int]] = {
    "few": (120, 300, 60, 140),
    "medium": (120, 260, 60, 120),
    "crowd": (120, 200, 60, 100),
}
MAX_PAIR_IOU = 0.3


@dataclass(frozen=True)
class SceneObject:
    label: str
    box: BoundingBox
    include: bool
    guideline: str

    def to_dict(self) -> dict[str, Any]:
        return {"label": self.label, "box_2d": self.box.as_list(), "include": self.include, "guideline": self.guideline}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SceneObject:
        return cls(str(d["label"]), BoundingBox.from_list(d["box_2d"]), bool(d["include"]), str(d["guideline"]))


@dataclass(frozen=True)
class DefectLedger:
    """Defects forced onto the Worker's first pass, as indices into ``SyntheticScene.objects``.

    ``misses`` and ``coarse`` reference included objects; ``falses`` reference
    distractors.
    """

    misses: tuple[int, ...] = ()
    falses: tuple[int, ...] = ()
    coarse: tuple[int, ...] = ()

    @property
    def total(self) -> int:
        return len(self.misses) + len(self.falses) + len(self.coarse)

    def to_dict(self) -> dict[str, list[int]]:
        return {"misses": list(self.misses), "falses": list(self.falses), "coarse": list(self.coarse)}


@dataclass(frozen=True)
class SyntheticScene:
    width: int
    height: int
    density: Density
    objects: tuple[SceneObject, ...]
    defects: DefectLedger = field(default_factory=DefectLedger)
    seed: int | None = None
    prompt: str = PROMPT

    def __post_init__(self) -> None:
        if self.density not in DENSITIES:
            raise ValidationError(f"unknown density class {self.density!r}")
        for o in self.objects:
            if not o.box.within(self.width, self.height):
                raise ValidationError(f"object box {o.box.as_list()} outside {self.width}x{self.height}")
        n = len(self.objects)
        for i in (*self.defects.misses, *self.defects.coarse):
            if not 0 <= i < n or not self.objects[i].include:
                raise ValidationError(f"planted miss/coarse {i} does not reference a ground-truth object")
        for i in self.defects.falses:
            if not 0 <= i < n or self.objects[i].include:
                raise ValidationError(f"planted false positive {i} does not reference a distractor")
        if set(self.defects.misses) & set(self.defects.coarse):
            raise ValidationError("an object cannot be both missed and coarse")

    @property
    def gt(self) -> list[tuple[int, SceneObject]]:
        return [(i, o) for i, o in enumerate(self.objects) if o.include]

    @property
    def distractors(self) -> list[tuple[int, SceneObject]]:
        return [(i, o) for i, o in enumerate(self.objects) if not o.include]

    def gt_mask(self) -> BinaryMask:
        return union_all((rasterize(o.box, self.width, self.height) for _, o in self.gt), self.width, self.height)

    @property
    def ref(self) -> str:
        return f"sim://{self.density}/{self.seed}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "width": self.width,
            "height": self.height,
            "density": self.density,
            "seed": self.seed,
            "prompt": self.prompt,
            "objects": [o.to_dict() for o in self.objects],
            "defects": self.defects.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SyntheticScene:
        try:
            defects = d.get("defects", {})
            return cls(
                int(d["width"]),
                int(d["height"]),
                d["density"],
                tuple(SceneObject.from_dict(o) for o in d["objects"]),
                DefectLedger(
                    tuple(defects.get("misses", ())), tuple(defects.get("falses", ())), tuple(defects.get("coarse", ()))
                ),
                d.get("seed"),
                d.get("prompt", PROMPT),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed scene: {exc}") from exc

    def save(self, path: str | Path) -> None:
        write_atomic(path, json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> SyntheticScene:
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not a scene file: {exc}") from exc


def _place(
    rng: np.random.Generator, placed: list[BoundingBox], sizes: tuple[int, int, int, int], width: int, height: int
) -> BoundingBox | None:
    h_lo, h_hi, w_lo, w_hi = sizes
    for _ in range(500):
        h = int(rng.integers(h_lo, h_hi + 1))
        w = int(rng.integers(w_lo, w_hi + 1))
        y = int(rng.integers(0, height - h + 1))
        x = int(rng.integers(0, width - w + 1))
        box = BoundingBox(y, x, y + h, x + w)
        if all(box.iou(p) < MAX_PAIR_IOU for p in placed):
            return box
    return None


def generate_scene(
    seed: int, density: Density, width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT
) -> SyntheticScene:
    """Deterministic scene for ``(seed, density)``. Nothing is planted."""
    if density not in DENSITIES:
        raise ValidationError(f"unknown density class {density!r}")
    sizes = SIZES[density]
    if height < sizes[1] or width < sizes[3]:
        raise ValidationError(f"{width}x{height} is too small for {density} scenes")
    rng = np.random.default_rng([seed, DENSITIES.index(density)])
    n_lo, n_hi = OBJECT_COUNTS[density]
    d_lo, d_hi = DISTRACTOR_COUNTS[density]
    n_gt = int(rng.integers(n_lo, n_hi + 1))
    n_dis = int(rng.integers(d_lo, d_hi + 1))
    while True:
        placed: list[BoundingBox] = []
        for _ in range(n_gt + n_dis):
            box = _place(rng, placed, sizes, width, height)
            if box is None:
                break
            placed.append(box)
        if len(placed) == n_gt + n_dis:
            break
    objects = []
    for i, box in enumerate(placed):
        pool = INCLUDED if i < n_gt else DISTRACTORS
        label, gid = pool[int(rng.integers(len(pool)))]
        objects.append(SceneObject(label, box, i < n_gt, gid))
    return SyntheticScene(width, height, density, tuple(objects), seed=seed)


def plant(
    scene: SyntheticScene,
    misses: Sequence[int] = (),
    falses: Sequence[int] = (),
    coarse: Sequence[int] = (),
) -> SyntheticScene:
    """Copy of ``scene`` with the given defects forced on the first Worker pass."""
    return replace(scene, defects=DefectLedger(tuple(misses), tuple(falses), tuple(coarse)))


def localize(scene: SyntheticScene, region: CropRegion) -> SyntheticScene:
    """The part of ``scene`` visible through ``region``, in crop coordinates.

    Objects are clipped to the crop; objects entirely outside it disappear
    together with their planted defects.
    """
    if region.is_full:
        return scene
    keep: dict[int, int] = {}
    objects = []
    for i, o in enumerate(scene.objects):
        clipped = o.box.intersection(region.box)
        if clipped is None:
            continue
        keep[i] = len(objects)
        objects.append(replace(o, box=region.to_local(clipped)))
    d = scene.defects
    remap = lambda idx: tuple(keep[i] for i in idx if i in keep)  # noqa: E731
    return SyntheticScene(
        region.width, region.height, scene.density, tuple(objects),
        DefectLedger(remap(d.misses), remap(d.falses), remap(d.coarse)), scene.seed, scene.prompt,
    )
