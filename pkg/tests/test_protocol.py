from __future__ import annotations

import json
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from guideseg.errors import ProtocolError, ValidationError
from guideseg.geometry import BinaryMask, BoundingBox, rasterize
from guideseg.protocol import (
    CandidateBox,
    ChangeSummary,
    FalsePositive,
    MissingObject,
    Refinement,
    SegmenterPrompt,
    SubjectInstance,
    SubjectRegistry,
    SupervisorReport,
    apply_actions,
    parse_boxgen_output,
    parse_supervisor_eval,
    parse_worker_output,
    replay_changes,
    serialize_boxgen_output,
    serialize_supervisor_report,
    serialize_worker_output,
)

GOLDEN = Path(__file__).parent / "golden"
W = H = 1000


def golden(name: str) -> str:
    return (GOLDEN / name).read_text()


def box_segmenter(prompt: SegmenterPrompt) -> BinaryMask:
    if prompt.mode == "box_with_negative_point":
        return BinaryMask.empty(W, H)
    return rasterize(prompt.box, W, H)


class TestWorker:
    def test_golden_example(self):
        (inst,) = parse_worker_output(golden("worker_detect.txt"), W, H)
        assert inst == SubjectInstance("sub_0", "pedestrian", BoundingBox(100, 100, 200, 200))

    def test_refresh_example(self):
        (inst,) = parse_worker_output(golden("worker_refresh.txt"), W, H)
        assert inst.box == BoundingBox(150, 150, 250, 250)

    def test_fenced_with_prose(self):
        bare = '{"instances":[{"id":"sub_0","label":"pedestrian","box_2d":[100,100,200,200]}]}'
        wrapped = f"Sure! Here are the detections:\n```json\n{bare}\n```\nLet me know."
        assert parse_worker_output(wrapped, W, H) == parse_worker_output(bare, W, H)

    def test_empty(self):
        assert parse_worker_output('{"instances":[]}', W, H) == []

    def test_no_json(self):
        with pytest.raises(ProtocolError) as info:
            parse_worker_output("I could not find anyone.", W, H)
        assert info.value.raw == "I could not find anyone."

    def test_clipping_and_degenerate(self):
        warnings: list[str] = []
        text = json.dumps(
            {"instances": [
                {"id": "sub_0", "label": "p", "box_2d": [-10, -10, 50, 50]},
                {"id": "sub_1", "label": "p", "box_2d": [20, 20, 20, 40]},
                {"id": "sub_2", "label": "p", "box_2d": [1200, 0, 1300, 10]},
            ]}
        )
        out = parse_worker_output(text, W, H, warnings)
        assert [s.id for s in out] == ["sub_0"]
        assert out[0].box == BoundingBox(0, 0, 50, 50)
        assert len(warnings) == 2


class TestSupervisorEval:
    def test_golden_example(self):
        warnings: list[str] = []
        report = parse_supervisor_eval(golden("supervisor_eval.txt"), warnings=warnings)
        assert report.missing_objects == (MissingObject("m_1", "umbrella", "Umbrella should be included per G<id>"),)
        assert report.counts() == (1, 0, 0)
        assert warnings == []

    def test_clean(self):
        report = parse_supervisor_eval('{"missing_objects":[],"false_positives":[],"refinements":[]}')
        assert report.is_clean and not report.needs_boxgen

    def test_refinement(self):
        report = parse_supervisor_eval(
            '{"missing_objects":[],"false_positives":[],'
            '"refinements":[{"box_id":"sub_0","instruction":"expand box to the right to include hand"}]}'
        )
        assert report.refinements == (Refinement("sub_0", "expand box to the right to include hand"),)

    def test_full_report(self):
        report = parse_supervisor_eval(golden("supervisor_eval_full.txt"), W, H)
        assert report.false_positives == (
            FalsePositive("e_1", "mannequin", "depictions are excluded per G5", "sub_2"),
        )
        assert report.refinements[0].replacement_box == BoundingBox(100, 100, 200, 230)

    def test_missing_field(self):
        with pytest.raises(ProtocolError):
            parse_supervisor_eval('{"missing_objects":[],"false_positives":[]}')

    def test_bad_id_names_entry(self):
        text = '{"missing_objects":[{"missing_object_id":"x_1","label":"a","reason":"G1"}],"false_positives":[],"refinements":[]}'
        with pytest.raises(ProtocolError, match=r"missing_objects\[0\]"):
            parse_supervisor_eval(text)

    def test_duplicate_ids(self):
        item = {"missing_object_id": "m_1", "label": "a", "reason": "per G1"}
        text = json.dumps({"missing_objects": [item, item], "false_positives": [], "refinements": []})
        with pytest.raises(ProtocolError):
            parse_supervisor_eval(text)

    def test_uncited_reason_warns(self):
        warnings: list[str] = []
        text = '{"missing_objects":[{"missing_object_id":"m_1","label":"a","reason":"looks like a person"}],"false_positives":[],"refinements":[]}'
        parse_supervisor_eval(text, warnings=warnings)
        assert len(warnings) == 1


class TestBoxgen:
    report = SupervisorReport(missing_objects=(MissingObject("m_1", "umbrella", "per G6"),))

    def test_golden_example(self):
        (c,) = parse_boxgen_output(golden("supervisor_boxgen.txt"), self.report, W, H)
        assert c == CandidateBox("m_1", "umbrella", BoundingBox(123, 456, 789, 987))
        assert not c.verified

    def test_unknown_id_dropped(self):
        warnings: list[str] = []
        text = '{"instances":[{"box_id":"m_9","label":"umbrella","box_2d":[1,1,5,5]}]}'
        assert parse_boxgen_output(text, self.report, W, H, warnings) == []
        assert "m_9" in warnings[0]

    def test_empty(self):
        assert parse_boxgen_output('{"instances":[]}', self.report, W, H) == []

    def test_no_json(self):
        with pytest.raises(ProtocolError):
            parse_boxgen_output("nothing", self.report, W, H)


class TestRoundTrip:
    @pytest.mark.parametrize("name", ["worker_detect.txt", "worker_refresh.txt"])
    def test_worker(self, name):
        first = parse_worker_output(golden(name), W, H)
        text = serialize_worker_output(first)
        assert parse_worker_output(text, W, H) == first
        assert serialize_worker_output(parse_worker_output(text, W, H)) == text

    @pytest.mark.parametrize("name", ["supervisor_eval.txt", "supervisor_eval_full.txt"])
    def test_supervisor(self, name):
        first = parse_supervisor_eval(golden(name))
        text = serialize_supervisor_report(first)
        assert parse_supervisor_eval(text) == first
        assert serialize_supervisor_report(parse_supervisor_eval(text)) == text

    def test_boxgen(self):
        report = SupervisorReport(missing_objects=(MissingObject("m_1", "umbrella", "per G6"),))
        first = parse_boxgen_output(golden("supervisor_boxgen.txt"), report, W, H)
        text = serialize_boxgen_output(first)
        assert parse_boxgen_output(text, report, W, H) == first
        assert serialize_boxgen_output(parse_boxgen_output(text, report, W, H)) == text


class TestFuzz:
    @given(st.binary(max_size=300))
    def test_bytes(self, data):
        text = data.decode("utf-8", errors="replace")
        report = SupervisorReport()
        for parse in (
            lambda t: parse_worker_output(t, W, H),
            lambda t: parse_supervisor_eval(t, W, H),
            lambda t: parse_boxgen_output(t, report, W, H),
        ):
            try:
                parse(text)
            except ProtocolError:
                pass

    json_values = st.recursive(
        st.none() | st.booleans() | st.integers() | st.floats() | st.text(max_size=8),
        lambda inner: st.lists(inner, max_size=4) | st.dictionaries(
            st.sampled_from(["instances", "id", "label", "box_2d", "box_id", "missing_objects",
                             "false_positives", "refinements", "missing_object_id", "reason", "instruction"]),
            inner, max_size=5,
        ),
        max_leaves=20,
    )

    @given(json_values)
    def test_structured_garbage(self, value):
        text = json.dumps(value)
        report = SupervisorReport(missing_objects=(MissingObject("m_1", "a", "G1"),))
        for parse in (
            lambda t: parse_worker_output(t, W, H),
            lambda t: parse_supervisor_eval(t, W, H),
            lambda t: parse_boxgen_output(t, report, W, H),
        ):
            try:
                parse(text)
            except ProtocolError:
                pass


def _registry(*boxes: BoundingBox) -> SubjectRegistry:
    return SubjectRegistry.seeded(
        [SubjectInstance(f"sub_{i}", "pedestrian", b, rasterize(b, W, H)) for i, b in enumerate(boxes)]
    )


def _diff(before: list[dict], after: list[dict]) -> dict[str, set]:
    b = {d["id"]: d for d in before}
    a = {d["id"]: d for d in after}
    return {
        "added": set(a) - set(b),
        "removed": set(b) - set(a),
        "changed": {k for k in set(a) & set(b) if a[k] != b[k]},
    }


class TestApplyActions:
    def test_add(self):
        reg = _registry(BoundingBox(0, 0, 10, 10))
        report = SupervisorReport(missing_objects=(MissingObject("m_1", "umbrella", "per G6"),))
        cand = CandidateBox("m_1", "umbrella", BoundingBox(50, 50, 80, 80), verified=True, score=0.9)
        summary = apply_actions(reg, [cand], report, box_segmenter)
        assert summary.counts() == {"added": 1, "removed": 0, "refined": 0}
        new = reg.get("sub_1")
        assert new is not None and new.mask is not None and new.mask.popcount == 900

    def test_remove_by_iou(self):
        boxes = [BoundingBox(0, 0, 10, 10), BoundingBox(20, 20, 30, 30), BoundingBox(100, 100, 200, 200)]
        reg = _registry(*boxes)
        report = SupervisorReport(false_positives=(FalsePositive("e_1", "mannequin", "per G5"),))
        cand = CandidateBox("e_1", "mannequin", BoundingBox(100, 100, 195, 200), verified=True, score=0.9)
        assert boxes[2].iou(cand.box) == pytest.approx(0.95)
        summary = apply_actions(reg, [cand], report, box_segmenter)
        assert summary.removed == ["sub_2"]
        assert reg.add("pedestrian", BoundingBox(0, 0, 5, 5)).id == "sub_3"

    def test_remove_by_subject_ref(self):
        reg = _registry(BoundingBox(0, 0, 10, 10), BoundingBox(20, 20, 30, 30))
        report = SupervisorReport(false_positives=(FalsePositive("e_1", "mannequin", "per G5", "sub_0"),))
        cand = CandidateBox("e_1", "mannequin", BoundingBox(500, 500, 510, 510), verified=True, score=0.9)
        apply_actions(reg, [cand], report, box_segmenter)
        assert "sub_0" not in reg and "sub_1" in reg

    def test_fp_without_overlap_is_kept(self):
        reg = _registry(BoundingBox(0, 0, 10, 10))
        report = SupervisorReport(false_positives=(FalsePositive("e_1", "x", "per G5"),))
        cand = CandidateBox("e_1", "x", BoundingBox(5, 5, 15, 15), verified=True, score=0.9)
        warnings: list[str] = []
        apply_actions(reg, [cand], report, box_segmenter, warnings=warnings)
        assert len(reg) == 1 and warnings

    def test_refinement_diff_oracle(self):
        reg = _registry(BoundingBox(100, 100, 200, 200), BoundingBox(300, 300, 400, 400))
        before = reg.snapshot()
        new_box = BoundingBox(100, 100, 200, 230)
        report = SupervisorReport(refinements=(Refinement("sub_0", "expand box to the right to include hand", new_box),))
        summary = apply_actions(reg, [], report, box_segmenter)
        diff = _diff(before, reg.snapshot())
        assert diff == {"added": set(), "removed": set(), "changed": {"sub_0"}}
        assert reg.get("sub_0").box == new_box
        assert reg.get("sub_0").mask == rasterize(new_box, W, H)
        assert summary.refined == [("sub_0", new_box)]

    def test_refinement_via_worker(self):
        reg = _registry(BoundingBox(100, 100, 200, 200))
        report = SupervisorReport(refinements=(Refinement("sub_0", "shrink box to exclude the background"),))
        calls = []

        def refine(subject, instruction):
            calls.append((subject.id, instruction))
            return BoundingBox(110, 110, 190, 190)

        apply_actions(reg, [], report, box_segmenter, refine)
        assert calls == [("sub_0", "shrink box to exclude the background")]
        assert reg.get("sub_0").box == BoundingBox(110, 110, 190, 190)

    def test_refinement_of_removed_subject(self):
        reg = _registry(BoundingBox(0, 0, 10, 10))
        report = SupervisorReport(
            false_positives=(FalsePositive("e_1", "x", "per G5", "sub_0"),),
            refinements=(Refinement("sub_0", "nudge", BoundingBox(0, 0, 12, 12)),),
        )
        cand = CandidateBox("e_1", "x", BoundingBox(0, 0, 10, 10), verified=True, score=0.9)
        warnings: list[str] = []
        summary = apply_actions(reg, [cand], report, box_segmenter, warnings=warnings)
        assert summary.counts() == {"added": 0, "removed": 1, "refined": 0}
        assert any("skipped" in w for w in warnings)

    def test_segmenter_failure_keeps_mask(self):
        from guideseg.errors import BackendError

        reg = _registry(BoundingBox(0, 0, 10, 10))
        old_mask = reg.get("sub_0").mask

        def broken(prompt):
            raise BackendError("down")

        report = SupervisorReport(refinements=(Refinement("sub_0", "nudge", BoundingBox(0, 0, 12, 12)),))
        warnings: list[str] = []
        apply_actions(reg, [], report, broken, warnings=warnings)
        assert reg.get("sub_0").mask == old_mask
        assert warnings

    def test_unverified_rejected(self):
        reg = _registry()
        report = SupervisorReport(missing_objects=(MissingObject("m_1", "a", "G1"),))
        with pytest.raises(ValidationError):
            apply_actions(reg, [CandidateBox("m_1", "a", BoundingBox(0, 0, 5, 5))], report, box_segmenter)

    @given(
        st.lists(st.tuples(st.integers(0, 900), st.integers(0, 900), st.integers(5, 90)), min_size=0, max_size=6),
        st.lists(st.integers(0, 5), max_size=4, unique=True),
        st.lists(st.tuples(st.integers(0, 900), st.integers(0, 900)), max_size=4),
    )
    def test_id_conservation(self, seeds, fp_targets, adds):
        boxes = [BoundingBox(y, x, y + s, x + s) for y, x, s in seeds]
        reg = _registry(*boxes)
        before_ids = {s.id for s in reg}
        n_before = len(reg)
        falses = tuple(
            FalsePositive(f"e_{j}", "x", "per G5", f"sub_{t}") for j, t in enumerate(fp_targets) if t < len(boxes)
        )
        missing = tuple(MissingObject(f"m_{j}", "p", "per G0") for j in range(len(adds)))
        report = SupervisorReport(missing, falses)
        cands = [CandidateBox(f.id, "x", BoundingBox(0, 0, 1, 1), True, 0.9) for f in falses]
        cands += [CandidateBox(f"m_{j}", "p", BoundingBox(y, x, y + 10, x + 10), True, 0.9) for j, (y, x) in enumerate(adds)]
        summary = apply_actions(reg, cands, report, box_segmenter)
        added_ids = {s.id for s in summary.added}
        assert not added_ids & before_ids
        assert len(reg) == n_before + len(summary.added) - len(summary.removed)
        assert reg.next_id > max((int(s.id[4:]) for s in reg), default=-1)

    def test_replay(self):
        reg = _registry(BoundingBox(0, 0, 10, 10), BoundingBox(20, 20, 30, 30))
        start = reg.copy()
        report = SupervisorReport(
            missing_objects=(MissingObject("m_1", "p", "per G0"),),
            false_positives=(FalsePositive("e_1", "x", "per G5", "sub_1"),),
            refinements=(Refinement("sub_0", "nudge", BoundingBox(0, 0, 12, 12)),),
        )
        cands = [
            CandidateBox("e_1", "x", BoundingBox(20, 20, 30, 30), True, 0.9),
            CandidateBox("m_1", "p", BoundingBox(50, 50, 60, 60), True, 0.9),
        ]
        summary = apply_actions(reg, cands, report, box_segmenter)
        logged = ChangeSummary.from_dict(json.loads(json.dumps(summary.to_dict())))
        replayed = replay_changes(start, logged, box_segmenter)
        assert replayed.snapshot() == reg.snapshot()


class TestRegistry:
    def test_counter_exceeds_ids(self):
        reg = SubjectRegistry.seeded([SubjectInstance("sub_7", "p", BoundingBox(0, 0, 1, 1))])
        assert reg.next_id == 8
        assert reg.add("p", BoundingBox(0, 0, 2, 2)).id == "sub_8"

    def test_ids_not_reused(self):
        reg = SubjectRegistry()
        a = reg.add("p", BoundingBox(0, 0, 1, 1))
        reg.remove(a.id)
        assert reg.add("p", BoundingBox(0, 0, 1, 1)).id != a.id

    def test_duplicate_seed(self):
        inst = SubjectInstance("sub_0", "p", BoundingBox(0, 0, 1, 1))
        with pytest.raises(ValidationError):
            SubjectRegistry.seeded([inst, inst])
