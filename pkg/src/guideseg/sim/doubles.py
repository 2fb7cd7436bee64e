"""Seeded stand-ins for every model backend.

The doubles answer in the same JSON the real models are asked for, so their
output goes through the production parsers. Each crop carries its own
:class:`SimWorld` with one RNG stream per role; the Supervisor also leaves a
side channel there that tells boxgen and the Worker which ground-truth box an
``m_``/``e_`` entry or refinement refers to.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from ..agents.base import BackendRequest, BackendResponse, ImageView
from ..airc import IssueCounts
from ..context import downscale_box
from ..errors import ValidationError
from ..geometry import BinaryMask, BoundingBox, CropRegion, rasterize
from ..loop import AgentSet
from ..protocol import SegmenterPrompt, SubjectRegistry
from .model import ErrorModel
from .scene import SyntheticScene, localize

ROLE_STREAMS = ("worker", "supervisor", "boxgen", "scorer")
VLM_INPUT_TOKENS = 2000
VLM_OUTPUT_TOKENS = 200
VLM_LATENCY_MS = 1100.0
MATCH_IOU = 0.5
REFINE_IOU = 0.8
VERIFY_IOU = 0.4
LOGIT = 4.0
COARSE_FRAC = 0.12
UNDERSIZE_FRAC = 0.3


class SimWorld:
    def __init__(self, seed: int | Sequence[int]) -> None:
        children = np.random.SeedSequence(seed).spawn(len(ROLE_STREAMS))
        self.rng = {name: np.random.default_rng(c) for name, c in zip(ROLE_STREAMS, children)}
        self.targets: dict[str, BoundingBox] = {}
        self.refine_target: dict[str, BoundingBox] = {}


@dataclass(eq=False)
class SimCrop:
    """Image handle for one crop of a simulated scene."""

    scene: SyntheticScene
    model: ErrorModel
    world: SimWorld
    ref: str


@dataclass(eq=False)
class SimImage:
    """Image handle for a whole simulated scene; :meth:`crop` gives per-crop handles."""

    scene: SyntheticScene
    model: ErrorModel = field(default_factory=ErrorModel)
    seed: int = 0

    @property
    def ref(self) -> str:
        return self.scene.ref

    @property
    def size(self) -> tuple[int, int]:
        return self.scene.width, self.scene.height

    def crop(self, region: CropRegion, index: int = 0) -> SimCrop:
        return SimCrop(localize(self.scene, region), self.model, SimWorld([self.seed, index]), f"{self.ref}#{index}")


def _crop_handle(view: ImageView) -> SimCrop:
    h = view.handle
    if not isinstance(h, SimCrop):
        raise ValidationError(f"simulated backend needs a SimCrop handle, got {type(h).__name__}")
    return h


def _jitter(box: BoundingBox, px: int, rng: np.random.Generator, width: int, height: int) -> BoundingBox:
    if px == 0:
        return box
    d = rng.integers(-px, px + 1, size=4)
    out = BoundingBox.clipped(
        box.y_min + int(d[0]), box.x_min + int(d[1]), box.y_max + int(d[2]), box.x_max + int(d[3]), width, height
    )
    return out if out is not None else box


def _coarse(box: BoundingBox, width: int, height: int) -> BoundingBox:
    dy = max(1, round(box.height * COARSE_FRAC))
    dx = max(1, round(box.width * COARSE_FRAC))
    return BoundingBox.clipped(box.y_min - dy, box.x_min - dx, box.y_max + dy, box.x_max + dx, width, height) or box


def _undersized(box: BoundingBox) -> BoundingBox:
    h = max(1, round(box.height * UNDERSIZE_FRAC))
    w = max(1, round(box.width * UNDERSIZE_FRAC))
    cy, cx = box.center
    y0, x0 = int(cy - h / 2), int(cx - w / 2)
    return BoundingBox(max(0, y0), max(0, x0), max(0, y0) + h, max(0, x0) + w)


def match_subjects(
    subjects: Sequence[tuple[str, BoundingBox]], gt: Sequence[BoundingBox]
) -> tuple[list[tuple[str, int, float]], list[int], list[str]]:
    """Greedy one-to-one matching by descending IoU (>= 0.5).

    Returns ``(pairs, unmatched gt indices, unmatched subject ids)``; ties go
    to the earlier subject, then the earlier ground-truth box.
    """
    cands = []
    for si, (sid, sbox) in enumerate(subjects):
        for gi, gbox in enumerate(gt):
            iou = sbox.iou(gbox)
            if iou >= MATCH_IOU:
                cands.append((-iou, si, gi, sid))
    cands.sort()
    used_s: set[int] = set()
    used_g: set[int] = set()
    pairs = []
    for neg, si, gi, sid in cands:
        if si in used_s or gi in used_g:
            continue
        used_s.add(si)
        used_g.add(gi)
        pairs.append((sid, gi, -neg))
    unmatched_g = [gi for gi in range(len(gt)) if gi not in used_g]
    unmatched_s = [sid for si, (sid, _) in enumerate(subjects) if si not in used_s]
    return pairs, unmatched_g, unmatched_s


def true_issue_counts(scene: SyntheticScene, registry: SubjectRegistry | Sequence[tuple[str, BoundingBox]]) -> IssueCounts:
    """Issues a perfect Supervisor would report for ``registry`` on ``scene``."""
    subjects = [(s.id, s.box) for s in registry] if isinstance(registry, SubjectRegistry) else list(registry)
    pairs, missed, extra = match_subjects(subjects, [o.box for _, o in scene.gt])
    return IssueCounts(len(missed), len(extra), sum(1 for _, _, iou in pairs if iou < REFINE_IOU))


def _subjects_from(context: dict[str, Any]) -> list[tuple[str, str, BoundingBox]]:
    return [(s["id"], s["label"], BoundingBox.from_list(s["box_2d"])) for s in context.get("subjects", [])]


def _vlm(payload: dict[str, Any]) -> BackendResponse:
    return BackendResponse(
        json.dumps(payload, separators=(",", ":")), VLM_INPUT_TOKENS, VLM_OUTPUT_TOKENS, VLM_LATENCY_MS
    )


def _free_box(scene: SyntheticScene, rng: np.random.Generator) -> BoundingBox | None:
    """A box over empty background, for hallucinated detections."""
    h = min(scene.height, 120)
    w = min(scene.width, 60)
    for _ in range(20):
        y = int(rng.integers(0, scene.height - h + 1))
        x = int(rng.integers(0, scene.width - w + 1))
        box = BoundingBox(y, x, y + h, x + w)
        if all(box.iou(o.box) < 0.1 for o in scene.objects):
            return box
    return None


class SimWorker:
    def complete(self, request: BackendRequest) -> BackendResponse:
        if request.role.role != "worker":
            raise ValidationError(f"SimWorker cannot play {request.role.role}")
        crop = _crop_handle(request.images[0])
        if "subjects" in request.context:
            return self._refresh(crop, request.context)
        return self._detect(crop)

    def _detect(self, crop: SimCrop) -> BackendResponse:
        scene, m, rng = crop.scene, crop.model, crop.world.rng["worker"]
        gt, dis = scene.gt, scene.distractors
        miss_u = rng.random(len(gt))
        coarse_u = rng.random(len(gt))
        false_u = rng.random(len(dis))
        out = []
        for k, (i, o) in enumerate(gt):
            if i in scene.defects.misses or miss_u[k] < m.worker_miss_rate:
                continue
            if i in scene.defects.coarse or coarse_u[k] < m.worker_coarse_rate:
                box = _coarse(o.box, scene.width, scene.height)
            else:
                box = _jitter(o.box, m.worker_jitter_px, rng, scene.width, scene.height)
            out.append((o.label, box))
        for k, (i, o) in enumerate(dis):
            if i in scene.defects.falses or false_u[k] < m.worker_false_rate:
                out.append((scene.prompt, _jitter(o.box, m.worker_jitter_px, rng, scene.width, scene.height)))
        return _vlm({"instances": [{"id": f"sub_{n}", "label": lbl, "box_2d": b.as_list()} for n, (lbl, b) in enumerate(out)]})

    def _refresh(self, crop: SimCrop, context: dict[str, Any]) -> BackendResponse:
        scene, m, rng, world = crop.scene, crop.model, crop.world.rng["worker"], crop.world
        subjects = _subjects_from(context)
        boxes = {sid: box for sid, _, box in subjects}
        for ref in context.get("refinements", []):
            sid = ref["box_id"]
            target = world.refine_target.get(sid)
            if sid not in boxes or target is None:
                continue
            if rng.random() < m.fix_success_prob:
                boxes[sid] = _jitter(target, m.worker_jitter_px, rng, scene.width, scene.height)
        instances = [{"id": sid, "label": lbl, "box_2d": boxes[sid].as_list()} for sid, lbl, _ in subjects]
        if rng.random() < m.new_issue_rate:
            uncovered = [o.box for _, o in scene.distractors if all(o.box.iou(b) < MATCH_IOU for b in boxes.values())]
            box = uncovered[int(rng.integers(len(uncovered)))] if uncovered else _free_box(scene, rng)
            if box is not None:
                nxt = 1 + max((int(sid[4:]) for sid in boxes), default=-1)
                instances.append({"id": f"sub_{nxt}", "label": scene.prompt, "box_2d": box.as_list()})
        return _vlm({"instances": instances})


class SimSupervisor:
    def complete(self, request: BackendRequest) -> BackendResponse:
        if request.role.role != "supervisor_eval":
            raise ValidationError(f"SimSupervisor cannot play {request.role.role}")
        crop = _crop_handle(request.images[0])
        scene, m, world = crop.scene, crop.model, crop.world
        rng = world.rng["supervisor"]
        world.targets.clear()
        world.refine_target.clear()
        subjects = _subjects_from(request.context)
        gt = scene.gt
        pairs, missed, extra = match_subjects([(sid, b) for sid, _, b in subjects], [o.box for _, o in gt])
        by_id = {sid: b for sid, _, b in subjects}

        missing = []
        for gi in missed:
            if rng.random() < m.supervisor_detect_prob:
                o = gt[gi][1]
                mid = f"m_{len(missing)}"
                world.targets[mid] = o.box
                missing.append({"missing_object_id": mid, "label": o.label, "reason": f"{o.label} left unsegmented; required by {o.guideline}"})

        falses = []
        for sid in extra:
            if rng.random() < m.supervisor_detect_prob:
                box = by_id[sid]
                best = max(scene.objects, key=lambda o: box.iou(o.box), default=None)
                if best is not None and box.iou(best.box) >= 0.1:
                    label, why = best.label, f"{best.label} is excluded by {best.guideline}"
                else:
                    label, why = "background", "no person here; nothing under G0 applies"
                eid = f"e_{len(falses)}"
                world.targets[eid] = box
                falses.append({"id": eid, "label": label, "reason": why, "subject_ref": sid})

        refinements = []
        for sid, gi, iou in pairs:
            needs = iou < REFINE_IOU
            if (needs and rng.random() < m.supervisor_detect_prob) or (not needs and rng.random() < m.spurious_refinement_rate):
                world.refine_target[sid] = gt[gi][1].box
                refinements.append({"box_id": sid, "instruction": "tighten the box to the visible person (G10)"})
        return _vlm({"missing_objects": missing, "false_positives": falses, "refinements": refinements})


class SimBoxgen:
    def complete(self, request: BackendRequest) -> BackendResponse:
        if request.role.role != "supervisor_boxgen":
            raise ValidationError(f"SimBoxgen cannot play {request.role.role}")
        crop = _crop_handle(request.images[0])
        scene, m, world = crop.scene, crop.model, crop.world
        rng = world.rng["boxgen"]
        report = request.context.get("report", {})
        entries = [(e["missing_object_id"], e["label"]) for e in report.get("missing_objects", [])]
        entries += [(e["id"], e["label"]) for e in report.get("false_positives", [])]
        drop_u = rng.random(len(entries))
        out = []
        for k, (bid, label) in enumerate(entries):
            target = world.targets.get(bid)
            if target is None or drop_u[k] < m.boxgen_drop_rate:
                continue
            if rng.random() < m.fix_success_prob:
                box = _jitter(target, m.worker_jitter_px, rng, scene.width, scene.height)
            else:
                box = _undersized(target)
            out.append({"box_id": bid, "label": label, "box_2d": box.as_list()})
        return _vlm({"instances": out})


class SimScorer:
    """Logit +4 when the crop shows an object of ``label`` (IoU >= 0.4), else -4; noise flips the sign."""

    def score(self, image: ImageView, crop: BoundingBox, label: str) -> float:
        handle = _crop_handle(image)
        objs = handle.scene.objects
        if label == "background":
            hit = all(crop.iou(o.box) < VERIFY_IOU for o in objs)
        else:
            hit = any(o.label == label and crop.iou(o.box) >= VERIFY_IOU for o in objs)
        if handle.world.rng["scorer"].random() < handle.model.verifier_noise:
            hit = not hit
        return LOGIT if hit else -LOGIT


class SimSegmenter:
    """Box prompt -> the box eroded by 1 px; negative-point prompt -> empty mask."""

    def segment(self, image: ImageView, prompt: SegmenterPrompt) -> BinaryMask:
        if prompt.mode == "box_with_negative_point":
            return BinaryMask.empty(image.width, image.height)
        inner = prompt.box.erode(1)
        if inner is None:
            return BinaryMask.empty(image.width, image.height)
        return rasterize(inner, image.width, image.height)


def _scene_of(view: ImageView) -> SyntheticScene:
    h = view.handle
    if isinstance(h, (SimImage, SimCrop)):
        return h.scene
    raise ValidationError(f"simulated backend needs a simulated image handle, got {type(h).__name__}")


class SimCaptioner:
    def complete(self, request: BackendRequest) -> BackendResponse:
        scene = _scene_of(request.images[0])
        return BackendResponse(
            f"a street scene with {len(scene.gt)} people and {len(scene.distractors)} other figures"
        )


class SimDetector:
    """Coarse detector that reports every ground-truth box at the view's downscaled resolution."""

    def complete(self, request: BackendRequest) -> BackendResponse:
        view = request.images[0]
        scene = _scene_of(view)
        sw, sh = view.scaled_size
        out = []
        for _, o in scene.gt:
            b = downscale_box(o.box, view.scale)
            clipped = BoundingBox.clipped(b.y_min, b.x_min, b.y_max, b.x_max, sw, sh)
            if clipped is not None:
                out.append({"label": o.label, "box_2d": clipped.as_list()})
        return BackendResponse(json.dumps({"instances": out}))


def sim_agents() -> AgentSet:
    return AgentSet(
        worker=SimWorker(),
        supervisor=SimSupervisor(),
        boxgen=SimBoxgen(),
        segmenter=SimSegmenter(),
        scorer=SimScorer(),
        captioner=SimCaptioner(),
        detector=SimDetector(),
    )
