from __future__ import annotations

import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from guideseg.errors import ShapeError, ValidationError
from guideseg.geometry import BinaryMask, BoundingBox, rasterize
from guideseg.metrics import (
    CostLedger,
    ImagePair,
    PriceConfig,
    cost_total,
    evaluate,
    expected_cost,
    ledger_summary,
)


def pixels(mask: BinaryMask) -> set[tuple[int, int]]:
    return {(y, x) for y in range(mask.height) for x in range(mask.width) if mask.bits[y, x]}


def brute(pairs):
    """Per-pixel set arithmetic; means via exact rational sums, rounded once."""
    ious, prs, recs, dices = [], [], [], []
    tot_i = tot_u = 0
    for pair in pairs:
        p, g = pixels(pair.pred), pixels(pair.gt)
        i, u = len(p & g), len(p | g)
        tot_i += i
        tot_u += u
        ious.append(i / u if u else 1.0)
        prs.append(i / len(p) if p else (1.0 if not g else 0.0))
        recs.append(i / len(g) if g else (1.0 if not p else 0.0))
        dices.append(2 * i / (len(p) + len(g)) if p or g else 1.0)
    mean = lambda xs: float(sum(Fraction(x) for x in xs)) / len(xs)  # noqa: E731
    return {
        "gIoU": mean(ious), "cIoU": tot_i / tot_u if tot_u else 1.0,
        "mPr": mean(prs), "mRec": mean(recs), "mDice": mean(dices),
    }


@st.composite
def pair_sets(draw):
    n = draw(st.integers(1, 8))
    out = []
    for k in range(n):
        w, h = draw(st.integers(1, 64)), draw(st.integers(1, 64))
        rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
        dp, dg = draw(st.sampled_from([0.0, 0.05, 0.5, 1.0])), draw(st.sampled_from([0.0, 0.05, 0.5, 1.0]))
        out.append(ImagePair(BinaryMask(rng.random((h, w)) < dp), BinaryMask(rng.random((h, w)) < dg), f"img{k}"))
    return out


def box_mask(y0, x0, y1, x1, w=40, h=40):
    return rasterize(BoundingBox(y0, x0, y1, x1), w, h)


class TestEvaluate:
    def test_mean_of_ious(self):
        a = box_mask(0, 0, 10, 10)
        half = box_mask(0, 0, 10, 5)
        report = evaluate([ImagePair(a, a), ImagePair(half, a)])
        assert report.gIoU == 0.75

    def test_large_object_weighting(self):
        # A: I=U=100; B: I=0, U=10
        a = box_mask(0, 0, 10, 10)
        b_pred = box_mask(0, 0, 1, 5)
        b_gt = box_mask(5, 5, 6, 10)
        report = evaluate([ImagePair(a, a), ImagePair(b_pred, b_gt)])
        assert [(s.intersection, s.union) for s in report.per_image] == [(100, 100), (0, 10)]
        assert report.gIoU == 0.5
        assert report.cIoU == pytest.approx(100 / 110)

    def test_perfect(self):
        m = box_mask(3, 3, 20, 30)
        report = evaluate([ImagePair(m, m), ImagePair(BinaryMask.empty(40, 40), BinaryMask.empty(40, 40))])
        assert report.summary() == {"gIoU": 1.0, "cIoU": 1.0, "mPr": 1.0, "mRec": 1.0, "mDice": 1.0}

    def test_empty_conventions(self):
        empty, full = BinaryMask.empty(40, 40), box_mask(0, 0, 5, 5)
        (s,) = evaluate([ImagePair(empty, full)]).per_image
        assert (s.iou, s.precision, s.recall, s.dice) == (0.0, 0.0, 0.0, 0.0)

    def test_errors(self):
        with pytest.raises(ValidationError):
            evaluate([])
        with pytest.raises(ShapeError):
            ImagePair(BinaryMask.empty(3, 3), BinaryMask.empty(3, 4))

    @given(pair_sets())
    def test_brute_force(self, pairs):
        assert evaluate(pairs).summary() == brute(pairs)

    @given(pair_sets())
    def test_dice_identity(self, pairs):
        for s in evaluate(pairs).per_image:
            if s.union:
                assert s.dice == pytest.approx(2 * s.iou / (1 + s.iou), abs=1e-12)

    @given(pair_sets(), st.randoms(use_true_random=False))
    def test_permutation_invariant(self, pairs, rnd):
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        a, b = evaluate(pairs).summary(), evaluate(shuffled).summary()
        assert a == pytest.approx(b, abs=1e-15)
        assert all(0.0 <= v <= 1.0 for v in a.values())

    def test_csv_and_json(self):
        m = box_mask(0, 0, 10, 10)
        report = evaluate([ImagePair(m, m, "a")])
        lines = report.to_csv().splitlines()
        assert lines[0].startswith("name,intersection")
        assert lines[1].startswith("a,100,100")
        assert json.loads(json.dumps(report.to_dict()))["gIoU"] == 1.0


class TestCost:
    def test_single_call(self):
        ledger = CostLedger()
        ledger.record("worker", 2000, 200, 1100)
        assert cost_total(ledger) == pytest.approx(0.0011, abs=1e-12)

    def test_two_iterations(self):
        ledger = CostLedger()
        for _ in range(2 * 3):
            ledger.record("worker", 2000, 200, 1100)
        assert cost_total(ledger) == pytest.approx(0.0066, abs=1e-12)
        assert expected_cost(2) == pytest.approx(0.0066, abs=1e-12)
        assert expected_cost(4) == pytest.approx(0.0132, abs=1e-12)

    def test_average_iterations(self):
        assert expected_cost(2.66) == pytest.approx(0.008778, abs=1e-12)
        assert round(expected_cost(2.66), 4) == 0.0088

    def test_custom_prices(self):
        ledger = CostLedger(PriceConfig(1.0, 10.0))
        ledger.record("worker", 1_000_000, 100_000, 1)
        assert cost_total(ledger) == pytest.approx(2.0)

    def test_summary(self):
        assert ledger_summary(CostLedger())["median_latency_ms"] == 0
        assert ledger_summary(CostLedger())["calls"] == 0
        ledger = CostLedger()
        for lat in (1000, 1300, 1100):
            ledger.record("supervisor_eval", 2000, 200, lat)
        s = ledger_summary(ledger)
        assert s["median_latency_ms"] == 1100
        assert (s["calls"], s["input_tokens"], s["output_tokens"]) == (3, 6000, 600)

    def test_round_trip(self):
        ledger = CostLedger()
        ledger.record("worker", 1, 2, 3.5)
        ledger.record("worker", 0, 0, 1.0, ok=False)
        again = CostLedger.from_dict(json.loads(json.dumps(ledger.to_dict())))
        assert again.entries == ledger.entries

    def test_concurrent_appends(self):
        from concurrent.futures import ThreadPoolExecutor

        ledger = CostLedger()
        with ThreadPoolExecutor(8) as pool:
            list(pool.map(lambda i: ledger.record("worker", i, 0, 0.0), range(1000)))
        assert len(ledger) == 1000
        assert sorted(e.input_tokens for e in ledger.entries) == list(range(1000))

    def test_negative_tokens(self):
        with pytest.raises(ValidationError):
            CostLedger().record("worker", -1, 0, 0)
