"""Agent wire protocol: message types, tolerant parsers, serializers and the subject registry.

Field names follow the agents' JSON exactly (``instances``, ``id``, ``label``,
``box_2d``, ``missing_objects``, ``missing_object_id``, ``false_positives``,
``refinements``, ``box_id``, ``reason``). ``box_2d`` is always
``[y_min, x_min, y_max, x_max]`` in pixels of the image the agent was shown.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Literal, Protocol, Sequence

from .errors import BackendError, ProtocolError, ValidationError
from .geometry import BinaryMask, BoundingBox

log = logging.getLogger(__name__)

SUB_RE = re.compile(r"^sub_(0|[1-9][0-9]*)$")
MISSING_RE = re.compile(r"^m_(0|[1-9][0-9]*)$")
FALSE_RE = re.compile(r"^e_(0|[1-9][0-9]*)$")
CITE_RE = re.compile(r"G_?<?\s*(\d+|id)\s*>?")
_FENCE_RE = re.compile(r"```(?:json|JSON)?\s*(.*?)```", re.DOTALL)

FP_MATCH_IOU = 0.5


def _note(warnings: list[str] | None, message: str) -> None:
    log.warning(message)
    if warnings is not None:
        warnings.append(message)


# --------------------------------------------------------------------------- JSON extraction


def extract_json(text: str) -> Any:
    """Pull the first JSON value out of free-form model output.

    Handles bare JSON, fenced code blocks, JSON embedded in prose, and the
    brace-less ``"instances": [...]`` fragments some prompts elicit.
    """
    if not isinstance(text, str):
        raise ProtocolError("model output is not text", raw=repr(text))
    try:
        return _extract(text)
    except ProtocolError:
        raise
    except (RecursionError, ValueError, MemoryError) as exc:
        raise ProtocolError(f"unparseable model output: {exc}", raw=text) from exc


def _extract(text: str) -> Any:
    candidates = [text.strip()]
    candidates += [m.group(1).strip() for m in _FENCE_RE.finditer(text)]
    for cand in candidates:
        if not cand:
            continue
        try:
            return json.loads(cand)
        except json.JSONDecodeError:
            pass
        if cand.startswith('"'):
            try:
                return json.loads("{" + cand.rstrip().rstrip(",") + "}")
            except json.JSONDecodeError:
                pass
    decoder = json.JSONDecoder()
    for cand in candidates:
        for pos, ch in enumerate(cand):
            if ch not in "{[":
                continue
            try:
                value, _ = decoder.raw_decode(cand, pos)
            except json.JSONDecodeError:
                continue
            if isinstance(value, (dict, list)):
                return value
    raise ProtocolError("no parseable JSON in model output", raw=text)


def _as_object(value: Any, text: str) -> dict[str, Any]:
    if isinstance(value, list):
        # Bare list of instances.
        return {"instances": value}
    if not isinstance(value, dict):
        raise ProtocolError("model output JSON is not an object", raw=text)
    return value


def _box(raw: Any, width: int, height: int) -> BoundingBox | None:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise ValueError(f"box_2d must be a list of 4 numbers, got {raw!r}")
    coords = []
    for c in raw:
        if isinstance(c, bool) or not isinstance(c, (int, float)):
            raise ValueError(f"non-numeric box coordinate {c!r}")
        if c != c or c in (float("inf"), float("-inf")):
            raise ValueError("non-finite box coordinate")
        coords.append(c)
    y0, x0, y1, x1 = coords
    return BoundingBox.clipped(y0, x0, y1, x1, width, height)


# --------------------------------------------------------------------------- subjects


@dataclass(frozen=True)
class SubjectInstance:
    id: str
    label: str
    box: BoundingBox
    mask: BinaryMask | None = None

    def __post_init__(self) -> None:
        if not SUB_RE.match(self.id):
            raise ValidationError(f"subject id {self.id!r} does not match sub_<n>")

    @property
    def number(self) -> int:
        return int(self.id[4:])

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "label": self.label, "box_2d": self.box.as_list()}


class SubjectRegistry:
    """The Worker's live detections, keyed by ``sub_<n>`` in insertion order.

    Ids are never reused within a run: the counter only moves forward.
    """

    def __init__(self) -> None:
        self._subjects: dict[str, SubjectInstance] = {}
        self._next = 0

    @classmethod
    def seeded(cls, instances: Sequence[SubjectInstance]) -> SubjectRegistry:
        reg = cls()
        for inst in instances:
            reg._insert(inst)
        return reg

    def _insert(self, inst: SubjectInstance) -> None:
        if inst.id in self._subjects:
            raise ValidationError(f"duplicate subject id {inst.id}")
        self._subjects[inst.id] = inst
        self._next = max(self._next, inst.number + 1)

    @property
    def next_id(self) -> int:
        return self._next

    def add(self, label: str, box: BoundingBox, mask: BinaryMask | None = None) -> SubjectInstance:
        inst = SubjectInstance(f"sub_{self._next}", label, box, mask)
        self._insert(inst)
        return inst

    def remove(self, sid: str) -> SubjectInstance:
        return self._subjects.pop(sid)

    def replace(self, sid: str, box: BoundingBox, mask: BinaryMask | None) -> SubjectInstance:
        old = self._subjects[sid]
        new = SubjectInstance(sid, old.label, box, mask)
        self._subjects[sid] = new
        return new

    def get(self, sid: str) -> SubjectInstance | None:
        return self._subjects.get(sid)

    def __contains__(self, sid: object) -> bool:
        return sid in self._subjects

    def __iter__(self) -> Iterator[SubjectInstance]:
        return iter(list(self._subjects.values()))

    def __len__(self) -> int:
        return len(self._subjects)

    def copy(self) -> SubjectRegistry:
        out = SubjectRegistry()
        out._subjects = dict(self._subjects)
        out._next = self._next
        return out

    def snapshot(self) -> list[dict[str, Any]]:
        return [s.to_dict() for s in self._subjects.values()]

    def boxes(self) -> dict[str, BoundingBox]:
        return {sid: s.box for sid, s in self._subjects.items()}


def parse_worker_output(
    text: str, width: int, height: int, warnings: list[str] | None = None
) -> list[SubjectInstance]:
    """Parse Worker detections. Degenerate or malformed instances are dropped with a warning."""
    data = _as_object(extract_json(text), text)
    raw = data.get("instances")
    if not isinstance(raw, list):
        raise ProtocolError("worker output has no 'instances' list", raw=text)
    out: list[SubjectInstance] = []
    seen: set[str] = set()
    for pos, item in enumerate(raw):
        try:
            if not isinstance(item, dict):
                raise ValueError("instance is not an object")
            sid = str(item.get("id", ""))
            if not SUB_RE.match(sid):
                raise ValueError(f"bad subject id {sid!r}")
            if sid in seen:
                raise ValueError(f"duplicate subject id {sid}")
            label = item.get("label")
            if not isinstance(label, str) or not label.strip():
                raise ValueError("missing label")
            box = _box(item.get("box_2d"), width, height)
        except ValueError as exc:
            _note(warnings, f"worker instance {pos} dropped: {exc}")
            continue
        if box is None:
            _note(warnings, f"worker instance {sid} dropped: degenerate box after clipping")
            continue
        seen.add(sid)
        out.append(SubjectInstance(sid, label.strip(), box))
    return out


def serialize_worker_output(instances: Sequence[SubjectInstance]) -> str:
    return json.dumps({"instances": [s.to_dict() for s in instances]}, separators=(",", ":"))


# --------------------------------------------------------------------------- supervisor report


@dataclass(frozen=True)
class MissingObject:
    id: str
    label: str
    reason: str

    def to_dict(self) -> dict[str, Any]:
        return {"missing_object_id": self.id, "label": self.label, "reason": self.reason}


@dataclass(frozen=True)
class FalsePositive:
    id: str
    label: str
    reason: str
    subject_ref: str | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"id": self.id, "label": self.label, "reason": self.reason}
        if self.subject_ref is not None:
            out["subject_ref"] = self.subject_ref
        return out


@dataclass(frozen=True)
class Refinement:
    box_id: str
    instruction: str
    replacement_box: BoundingBox | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"box_id": self.box_id, "instruction": self.instruction}
        if self.replacement_box is not None:
            out["replacement_box"] = self.replacement_box.as_list()
        return out


@dataclass(frozen=True)
class SupervisorReport:
    missing_objects: tuple[MissingObject, ...] = ()
    false_positives: tuple[FalsePositive, ...] = ()
    refinements: tuple[Refinement, ...] = ()

    @property
    def is_clean(self) -> bool:
        return not (self.missing_objects or self.false_positives or self.refinements)

    @property
    def needs_boxgen(self) -> bool:
        return bool(self.missing_objects or self.false_positives)

    def counts(self) -> tuple[int, int, int]:
        return len(self.missing_objects), len(self.false_positives), len(self.refinements)

    def entry(self, box_id: str) -> MissingObject | FalsePositive | None:
        for m in self.missing_objects:
            if m.id == box_id:
                return m
        for f in self.false_positives:
            if f.id == box_id:
                return f
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "missing_objects": [m.to_dict() for m in self.missing_objects],
            "false_positives": [f.to_dict() for f in self.false_positives],
            "refinements": [r.to_dict() for r in self.refinements],
        }


def serialize_supervisor_report(report: SupervisorReport) -> str:
    return json.dumps(report.to_dict(), separators=(",", ":"))


def _text_field(item: dict[str, Any], key: str, where: str, text: str) -> str:
    value = item.get(key)
    if not isinstance(value, str) or not value.strip():
        raise ProtocolError(f"{where}: '{key}' must be a non-empty string", raw=text)
    return value.strip()


def parse_supervisor_eval(
    text: str, width: int | None = None, height: int | None = None, warnings: list[str] | None = None
) -> SupervisorReport:
    """Parse a schema-constrained Supervisor_eval report (strict; unknown keys ignored)."""
    data = extract_json(text)
    if not isinstance(data, dict):
        raise ProtocolError("supervisor report is not a JSON object", raw=text)
    for key in ("missing_objects", "false_positives", "refinements"):
        if key not in data:
            raise ProtocolError(f"supervisor report lacks '{key}'", raw=text)
        if not isinstance(data[key], list):
            raise ProtocolError(f"supervisor report field '{key}' is not a list", raw=text)

    missing: list[MissingObject] = []
    for pos, item in enumerate(data["missing_objects"]):
        where = f"missing_objects[{pos}]"
        if not isinstance(item, dict):
            raise ProtocolError(f"{where} is not an object", raw=text)
        mid = item.get("missing_object_id")
        if not isinstance(mid, str) or not MISSING_RE.match(mid):
            raise ProtocolError(f"{where}: bad missing_object_id {mid!r} (expected m_<n>)", raw=text)
        entry = MissingObject(mid, _text_field(item, "label", where, text), _text_field(item, "reason", where, text))
        if not CITE_RE.search(entry.reason):
            _note(warnings, f"{where} ({mid}) reason cites no guideline id")
        missing.append(entry)

    falses: list[FalsePositive] = []
    for pos, item in enumerate(data["false_positives"]):
        where = f"false_positives[{pos}]"
        if not isinstance(item, dict):
            raise ProtocolError(f"{where} is not an object", raw=text)
        fid = item.get("id", item.get("false_positive_id"))
        if not isinstance(fid, str) or not FALSE_RE.match(fid):
            raise ProtocolError(f"{where}: bad id {fid!r} (expected e_<n>)", raw=text)
        ref = item.get("subject_ref")
        if ref is not None and (not isinstance(ref, str) or not SUB_RE.match(ref)):
            raise ProtocolError(f"{where}: bad subject_ref {ref!r}", raw=text)
        entry_fp = FalsePositive(
            fid, _text_field(item, "label", where, text), _text_field(item, "reason", where, text), ref
        )
        if not CITE_RE.search(entry_fp.reason):
            _note(warnings, f"{where} ({fid}) reason cites no guideline id")
        falses.append(entry_fp)

    refinements: list[Refinement] = []
    for pos, item in enumerate(data["refinements"]):
        where = f"refinements[{pos}]"
        if not isinstance(item, dict):
            raise ProtocolError(f"{where} is not an object", raw=text)
        bid = item.get("box_id")
        if not isinstance(bid, str) or not SUB_RE.match(bid):
            raise ProtocolError(f"{where}: bad box_id {bid!r} (expected sub_<n>)", raw=text)
        instruction = item.get("instruction", item.get("reason"))
        if not isinstance(instruction, str) or not instruction.strip():
            raise ProtocolError(f"{where}: 'instruction' must be a non-empty string", raw=text)
        replacement = None
        if item.get("replacement_box") is not None:
            try:
                raw_box = item["replacement_box"]
                if width is not None and height is not None:
                    replacement = _box(raw_box, width, height)
                else:
                    replacement = BoundingBox.from_list(raw_box)
            except (ValueError, TypeError) as exc:
                raise ProtocolError(f"{where}: bad replacement_box: {exc}", raw=text) from exc
        refinements.append(Refinement(bid, instruction.strip(), replacement))

    for name, ids in (
        ("missing_objects", [m.id for m in missing]),
        ("false_positives", [f.id for f in falses]),
    ):
        if len(set(ids)) != len(ids):
            raise ProtocolError(f"duplicate ids in {name}", raw=text)
    return SupervisorReport(tuple(missing), tuple(falses), tuple(refinements))


# --------------------------------------------------------------------------- boxgen candidates


@dataclass(frozen=True)
class CandidateBox:
    box_id: str
    label: str
    box: BoundingBox
    verified: bool = False
    score: float | None = None

    @property
    def kind(self) -> Literal["missing", "false"]:
        return "missing" if self.box_id.startswith("m_") else "false"

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"box_id": self.box_id, "label": self.label, "box_2d": self.box.as_list()}
        if self.score is not None:
            out["score"] = self.score
            out["verified"] = self.verified
        return out


def parse_boxgen_output(
    text: str, report: SupervisorReport, width: int, height: int, warnings: list[str] | None = None
) -> list[CandidateBox]:
    data = _as_object(extract_json(text), text)
    raw = data.get("instances")
    if raw is None:
        # Some prompts get the lists echoed back by name.
        raw = []
        for key in ("missing_objects", "false_positives"):
            part = data.get(key) or []
            if not isinstance(part, list):
                raise ProtocolError(f"boxgen output field '{key}' is not a list", raw=text)
            raw += part
    if not isinstance(raw, list):
        raise ProtocolError("boxgen output has no 'instances' list", raw=text)
    out: list[CandidateBox] = []
    seen: set[str] = set()
    for pos, item in enumerate(raw):
        try:
            if not isinstance(item, dict):
                raise ValueError("instance is not an object")
            bid = item.get("box_id", item.get("missing_object_id", item.get("id")))
            if not isinstance(bid, str) or not (MISSING_RE.match(bid) or FALSE_RE.match(bid)):
                raise ValueError(f"bad box_id {bid!r}")
            entry = report.entry(bid)
            if entry is None:
                raise ValueError(f"box_id {bid} is not in the supervisor report")
            if bid in seen:
                raise ValueError(f"duplicate box_id {bid}")
            label = item.get("label")
            if not isinstance(label, str) or not label.strip():
                label = entry.label
            box = _box(item.get("box_2d"), width, height)
            if box is None:
                raise ValueError("degenerate box after clipping")
        except ValueError as exc:
            _note(warnings, f"boxgen candidate {pos} dropped: {exc}")
            continue
        seen.add(bid)
        out.append(CandidateBox(bid, label.strip(), box))
    return out


def serialize_boxgen_output(candidates: Sequence[CandidateBox]) -> str:
    return json.dumps(
        {"instances": [{"box_id": c.box_id, "label": c.label, "box_2d": c.box.as_list()} for c in candidates]},
        separators=(",", ":"),
    )


# --------------------------------------------------------------------------- applying actions


@dataclass(frozen=True)
class SegmenterPrompt:
    mode: Literal["box_positive", "box_with_negative_point"]
    box: BoundingBox
    point: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("box_positive", "box_with_negative_point"):
            raise ValidationError(f"unknown segmenter prompt mode {self.mode!r}")
        if self.point is not None and not self.box.contains_point(*self.point):
            raise ValidationError(f"negative point {self.point} lies outside box {self.box.as_list()}")
        if self.mode == "box_with_negative_point" and self.point is None:
            raise ValidationError("negative-point prompt needs a point")

    @classmethod
    def erase(cls, box: BoundingBox) -> SegmenterPrompt:
        cy, cx = box.center
        return cls("box_with_negative_point", box, (int(cy), int(cx)))


class SegmentFn(Protocol):
    def __call__(self, prompt: SegmenterPrompt) -> BinaryMask: ...


RefineFn = Callable[[SubjectInstance, str], "BoundingBox | None"]


@dataclass
class ChangeSummary:
    added: list[SubjectInstance] = field(default_factory=list)
    removed: list[str] = field(default_factory=list)
    refined: list[tuple[str, BoundingBox]] = field(default_factory=list)

    def counts(self) -> dict[str, int]:
        return {"added": len(self.added), "removed": len(self.removed), "refined": len(self.refined)}

    def to_dict(self) -> dict[str, Any]:
        return {
            "added": [s.to_dict() for s in self.added],
            "removed": list(self.removed),
            "refined": [{"id": sid, "box_2d": box.as_list()} for sid, box in self.refined],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ChangeSummary:
        return cls(
            added=[SubjectInstance(a["id"], a["label"], BoundingBox.from_list(a["box_2d"])) for a in data["added"]],
            removed=list(data["removed"]),
            refined=[(r["id"], BoundingBox.from_list(r["box_2d"])) for r in data["refined"]],
        )

    def merge(self, other: ChangeSummary) -> None:
        self.added.extend(other.added)
        self.removed.extend(other.removed)
        self.refined.extend(other.refined)


def _segment(segment: SegmentFn, prompt: SegmenterPrompt, warnings: list[str] | None, what: str) -> BinaryMask | None:
    try:
        return segment(prompt)
    except BackendError as exc:
        _note(warnings, f"segmenter failed for {what}: {exc}")
        return None


def apply_actions(
    registry: SubjectRegistry,
    candidates: Sequence[CandidateBox],
    report: SupervisorReport,
    segment: SegmentFn,
    refine: RefineFn | None = None,
    warnings: list[str] | None = None,
) -> ChangeSummary:
    """Apply verified supervisor actions to ``registry`` in place.

    Order: false-positive removals, then refinements, then additions, so a
    refinement aimed at a subject that was just erased is skipped and a fresh
    subject can never be mistaken for a false positive.
    """
    for c in candidates:
        if not c.verified:
            raise ValidationError(f"candidate {c.box_id} has not been verified")
    summary = ChangeSummary()

    for c in (c for c in candidates if c.kind == "false"):
        entry = report.entry(c.box_id)
        target: SubjectInstance | None = None
        if isinstance(entry, FalsePositive) and entry.subject_ref is not None:
            target = registry.get(entry.subject_ref)
            if target is None:
                _note(warnings, f"{c.box_id}: subject_ref {entry.subject_ref} no longer exists")
                continue
        else:
            best = 0.0
            for s in registry:
                iou = s.box.iou(c.box)
                if iou > best:
                    best, target = iou, s
            if best < FP_MATCH_IOU:
                _note(warnings, f"{c.box_id}: no subject overlaps the candidate at IoU >= {FP_MATCH_IOU}")
                continue
        assert target is not None
        mask = _segment(segment, SegmenterPrompt.erase(target.box), warnings, f"erasing {target.id}")
        if mask is None:
            continue
        if mask.popcount:
            _note(warnings, f"{c.box_id}: erase prompt left {mask.popcount} px on {target.id}; kept")
            continue
        registry.remove(target.id)
        summary.removed.append(target.id)

    for ref in report.refinements:
        subject = registry.get(ref.box_id)
        if subject is None:
            _note(warnings, f"refinement for {ref.box_id} skipped: subject not in registry")
            continue
        new_box = ref.replacement_box
        if new_box is None and refine is not None:
            new_box = refine(subject, ref.instruction)
        if new_box is None:
            _note(warnings, f"refinement for {ref.box_id} skipped: no corrected box")
            continue
        mask = _segment(segment, SegmenterPrompt("box_positive", new_box), warnings, f"refining {ref.box_id}")
        registry.replace(ref.box_id, new_box, mask if mask is not None else subject.mask)
        summary.refined.append((ref.box_id, new_box))

    for c in (c for c in candidates if c.kind == "missing"):
        mask = _segment(segment, SegmenterPrompt("box_positive", c.box), warnings, f"adding {c.box_id}")
        summary.added.append(registry.add(c.label, c.box, mask))

    return summary


def replay_changes(
    registry: SubjectRegistry, changes: ChangeSummary, segment: SegmentFn | None = None
) -> SubjectRegistry:
    """Re-apply a logged change set without consulting any model backend."""
    for sid in changes.removed:
        registry.remove(sid)
    for sid, box in changes.refined:
        mask = segment(SegmenterPrompt("box_positive", box)) if segment else None
        registry.replace(sid, box, mask)
    for added in changes.added:
        mask = segment(SegmenterPrompt("box_positive", added.box)) if segment else None
        inst = registry.add(added.label, added.box, mask)
        if inst.id != added.id:
            raise ValidationError(f"replay diverged: expected {added.id}, registry assigned {inst.id}")
    return registry
