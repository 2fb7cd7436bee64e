"""Scene and view builders shared by several test modules."""

from __future__ import annotations

from guideseg.agents.base import ImageView
from guideseg.geometry import BoundingBox, CropRegion
from guideseg.sim import SimImage
from guideseg.sim.model import ErrorModel
from guideseg.sim.scene import SceneObject, SyntheticScene


def make_scene(n_gt: int = 3, n_dis: int = 0, width: int = 640, height: int = 480, labels=None) -> SyntheticScene:
    """Non-overlapping objects laid out left to right; distractors follow the ground truth."""
    objects = []
    for i in range(n_gt + n_dis):
        box = BoundingBox(100, 10 + 80 * i, 260, 70 + 80 * i)
        if i < n_gt:
            label = labels[i] if labels else "pedestrian"
            objects.append(SceneObject(label, box, True, "G0"))
        else:
            objects.append(SceneObject("mannequin", box, False, "G5"))
    return SyntheticScene(width, height, "medium", tuple(objects), seed=0)


def crop_view(scene: SyntheticScene, model: ErrorModel | None = None, seed: int = 0) -> ImageView:
    region = CropRegion.full(scene.width, scene.height)
    image = SimImage(scene, model or ErrorModel.zero(), seed)
    return ImageView(image.crop(region, 0), region)
