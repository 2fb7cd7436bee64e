from __future__ import annotations

import json
from dataclasses import replace

import pytest

from guideseg.airc import Action, FixedIterations, IssueCounts, QTable
from guideseg.errors import BackendError, ValidationError
from guideseg.geometry import BoundingBox, rasterize, union_all
from guideseg.metrics import ImagePair, evaluate
from guideseg.pipeline import RunConfig, replay_trace, run_image
from guideseg.sim import ErrorModel, SimImage, generate_scene, plant, sim_agents, true_issue_counts
from guideseg.sim.doubles import SimWorker

from .helpers import make_scene

ZERO = RunConfig(error_model=ErrorModel.zero())


def run(scene, config=ZERO, **kw):
    return run_image(SimImage(scene, config.error_model, config.seed), config, **kw)


def eroded_union(scene):
    masks = [rasterize(o.box.erode(1), scene.width, scene.height) for _, o in scene.gt]
    return union_all(masks, scene.width, scene.height)


class TestConfig:
    def test_defaults(self):
        c = RunConfig()
        assert (c.k, c.downscale, c.margin) == (8, 0.8, 0)
        assert (c.worker_temperature, c.eval_temperature, c.boxgen_temperature) == (0.5, 0.3, 0.5)
        assert (c.verifier_buffer, c.verifier_threshold) == (0.1, 0.5)
        assert (c.bounds.min_iters, c.bounds.max_iters) == (2, 4)

    def test_round_trip(self, tmp_path):
        c = RunConfig(prompt="cyclist", k=5, error_model=ErrorModel(fix_success_prob=0.1))
        path = tmp_path / "c.json"
        path.write_text(json.dumps(c.to_dict()))
        assert RunConfig.load(path) == c

    @pytest.mark.parametrize(
        "data", [{"k": 0}, {"prompt": ""}, {"downscale": 1.5}, {"scope": "world"}, {"color": "red"}, {"bounds": {"min": 1}}]
    )
    def test_invalid(self, data):
        with pytest.raises(ValidationError):
            RunConfig.from_dict(data)


class TestRunImage:
    def test_zero_error_lossless(self):
        scene = generate_scene(11, "medium")
        mask, trace = run(scene)
        assert mask == eroded_union(scene)
        for crop in trace.crops:
            assert len(crop.passes) == 2
            assert crop.passes[0]["counts"] == [0, 0, 0]
            assert [d["action"] for d in crop.decisions] == ["CONTINUE", "STOP"]
        report = evaluate([ImagePair(mask, scene.gt_mask())])
        assert report.gIoU >= 0.95

    def test_planted_defects(self):
        scene = plant(make_scene(3, 1), misses=[1], falses=[3])
        mask, trace = run(scene)
        firsts = [c.passes[0]["counts"] for c in trace.crops]
        assert [sum(col) for col in zip(*firsts)] == [1, 1, 0]
        added = [a for c in trace.crops for a in c.passes[1]["changes"]["added"]]
        removed = [r for c in trace.crops for r in c.passes[1]["changes"]["removed"]]
        assert len(added) == 1 and len(removed) == 1
        final = [(str(i), BoundingBox.from_list(s["box_2d"])) for i, s in enumerate(trace.subjects)]
        assert true_issue_counts(scene, final) == IssueCounts(0, 0, 0)
        assert mask == eroded_union(scene)

    def test_two_iteration_cost(self):
        # An unfixable miss keeps boxgen busy on both passes: 3 calls per pass.
        scene = plant(make_scene(1), misses=[0])
        config = RunConfig(error_model=ErrorModel.zero(fix_success_prob=0.0))
        _, trace = run(scene, config, policy=FixedIterations(2))
        (crop,) = trace.crops
        assert [p["calls"] for p in crop.passes] == [3, 3]
        assert trace.cost["cost_usd"] == pytest.approx(0.0066, abs=1e-12)
        vlm_calls = sum(p["calls"] for p in crop.passes)
        assert sum(1 for e in trace.ledger.entries if e.input_tokens) == vlm_calls

    def test_call_accounting_with_skips(self):
        scene = generate_scene(4, "crowd")
        _, trace = run(scene, RunConfig())
        for crop in trace.crops:
            for p in crop.passes:
                assert p["calls"] == (2 if p["boxgen_skipped"] else 3)
        logged = sum(p["calls"] for c in trace.crops for p in c.passes)
        # the captioner and coarse detector are the only calls outside the passes
        assert len(trace.ledger) == logged + 2

    @pytest.mark.parametrize("seed", range(8))
    def test_replay(self, seed):
        scene = generate_scene(seed, ("few", "medium", "crowd")[seed % 3])
        _, trace = run(scene, RunConfig(seed=seed), policy=FixedIterations(4))
        data = json.loads(json.dumps(trace.to_dict()))
        assert replay_trace(data) == [
            [{k: s[k] for k in ("id", "label", "box_2d")} for s in c.final_registry] for c in trace.crops
        ]

    @pytest.mark.parametrize("seed", range(6))
    def test_stop_at_min_equals_fixed_two(self, seed):
        scene = generate_scene(seed, "crowd")
        table = QTable()
        table.q[:, Action.STOP] = 1.0
        config = RunConfig(seed=seed)
        mask_a, trace_a = run(scene, config, q_table=table)
        mask_b, trace_b = run(scene, config, policy=FixedIterations(2))
        assert mask_a == mask_b
        assert [c.passes for c in trace_a.crops] == [c.passes for c in trace_b.crops]

    @pytest.mark.parametrize("seed", range(10))
    def test_iteration_cap(self, seed):
        scene = generate_scene(seed, "crowd")
        table = QTable()
        table.q[:, Action.CONTINUE] = 5.0
        _, trace = run(scene, RunConfig(seed=seed, error_model=ErrorModel(fix_success_prob=0.1)), q_table=table)
        for crop in trace.crops:
            assert len(crop.passes) <= 4

    def test_failed_crop_is_isolated(self):
        scene = generate_scene(2, "crowd")

        class FailsOnSecondCrop(SimWorker):
            def complete(self, request):
                if request.images[0].handle.ref.endswith("#1"):
                    raise BackendError("worker unreachable")
                return super().complete(request)

        agents = replace(sim_agents(), worker=FailsOnSecondCrop())
        mask, trace = run(scene, ZERO, agents=agents)
        assert len(trace.crops) == 2
        left, right = trace.crops
        assert left.error is None and right.error is not None
        assert right.final_registry == []
        assert mask.bits[:, right.region.box.x_min:].sum() <= mask.bits[:, left.region.box.x_max:].sum()
        assert mask.popcount > 0

    def test_image_scope(self):
        scene = generate_scene(6, "crowd")
        mask, trace = run(scene, replace(ZERO, scope="image"))
        assert len(trace.crops) == 2
        assert [d["action"] for d in trace.decisions] == ["CONTINUE", "STOP"]
        assert mask == eroded_union(scene)

    def test_seam_duplicates_merge(self):
        scene = generate_scene(6, "crowd")
        _, trace = run(scene, ZERO)
        labels = [(s["label"], tuple(s["box_2d"])) for s in trace.subjects]
        assert len(labels) == len(set(labels))
        assert len(trace.subjects) == len(scene.gt)

    def test_training_mode_updates_table(self):
        table = QTable()
        config = RunConfig(airc_mode="train")
        run(generate_scene(1, "medium"), config, q_table=table)
        assert table.visits.sum() > 0

    def test_trace_is_json(self):
        _, trace = run(generate_scene(3, "few"))
        data = json.loads(json.dumps(trace.to_dict()))
        assert {"context", "crops", "ledger", "cost", "mask"} <= set(data)
        assert data["context"]["retrieved"] and len(data["context"]["retrieved"]) == 8


def test_index_from_another_embedder_is_rejected(tmp_path):
    from guideseg.guidelines import HashEmbedder, build_index, load_corpus
    from guideseg.pipeline import bundled_corpus

    build_index(load_corpus(bundled_corpus()), HashEmbedder(32)).save(tmp_path / "idx")
    config = replace(ZERO, index=str(tmp_path / "idx"))
    with pytest.raises(ValidationError, match="hash-bow-32"):
        run(generate_scene(0, "few"), config)
