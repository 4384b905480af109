import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from usamkit.evaluation import (
    SCENARIOS,
    ScoredSample,
    bench_uq_overhead,
    correction_curve,
    correlation_matrix,
    curves_to_csv,
    pearson,
    rel_auc_table_csv,
    scenario_ious,
)


def samples(base, corr, unc):
    return [ScoredSample(i, b, c, u) for i, (b, c, u) in enumerate(zip(base, corr, unc))]


ious = st.floats(0.0, 1.0)
trios = st.lists(st.tuples(ious, ious, st.floats(-10, 10)), min_size=1, max_size=8)


class TestCorrectionCurve:
    def test_no_gain_is_flat_with_unit_rel_auc(self):
        c = correction_curve(samples([0.3, 0.6, 0.9], [0.3, 0.6, 0.9], [1, 2, 3]))
        assert np.allclose(c.mious, 0.6)
        assert c.rel_auc == 1.0

    def test_two_sample_hand_example(self):
        c = correction_curve(samples([0.5, 0.9], [1.0, 1.0], [0.8, 0.1]))
        np.testing.assert_allclose(c.mious, [0.70, 0.95, 1.00], atol=1e-15)
        assert c.auc == pytest.approx(0.90, abs=1e-15)
        assert c.oracle_auc == pytest.approx(0.90, abs=1e-15)
        np.testing.assert_allclose(c.worst_mious, [0.70, 0.75, 1.00], atol=1e-15)
        assert c.worst_auc == pytest.approx(0.80, abs=1e-15)
        assert c.rel_auc == pytest.approx(1.0, abs=1e-12)

    def test_ties_broken_by_sample_id(self):
        s = [ScoredSample("b", 0.0, 1.0, 0.5), ScoredSample("a", 1.0, 1.0, 0.5)]
        c = correction_curve(s)
        # "a" (no gain) is corrected first
        np.testing.assert_allclose(c.mious, [0.5, 0.5, 1.0])

    @given(trios)
    def test_envelope_and_endpoints(self, rows):
        base, corr, unc = zip(*rows)
        c = correction_curve(samples(base, corr, unc))
        assert c.worst_auc - 1e-12 <= c.auc <= c.oracle_auc + 1e-12
        assert c.mious[0] == pytest.approx(np.mean(base), abs=1e-12)
        assert c.mious[-1] == pytest.approx(np.mean(corr), abs=1e-12)

    @given(trios)
    def test_matches_enumeration(self, rows):
        base, corr, unc = zip(*rows)
        c = correction_curve(samples(base, corr, unc))
        order = sorted(range(len(base)), key=lambda i: (-unc[i], i))
        ref = oracles.curve_by_enumeration(base, corr, order)
        assert c.auc == pytest.approx(oracles.trapezoid_auc(ref), abs=1e-12)

    @given(trios)
    def test_monotone_transform_invariance(self, rows):
        base, corr, unc = zip(*rows)
        moved = [float(np.tanh(u / 10) * 3 + 7) for u in unc]
        a = correction_curve(samples(base, corr, unc))
        b = correction_curve(samples(base, corr, moved))
        # rounding can merge very close scores, so compare only when ranks survive
        if len(set(moved)) == len(set(unc)):
            np.testing.assert_array_equal(a.mious, b.mious)
            assert a.rel_auc == b.rel_auc

    def test_oracle_and_worst_orderings(self):
        rng = np.random.default_rng(0)
        base, corr = rng.random(50), rng.random(50)
        gains = corr - base
        assert correction_curve(samples(base, corr, gains)).rel_auc == pytest.approx(1.0, abs=1e-12)
        assert correction_curve(samples(base, corr, -gains)).rel_auc == pytest.approx(0.0, abs=1e-12)

    def test_random_scores_concentrate(self):
        rng = np.random.default_rng(1)
        base, corr = rng.random(1000), rng.random(1000)
        hits = sum(0.45 <= correction_curve(samples(base, corr, np.random.default_rng(s).random(1000))).rel_auc
                   <= 0.55 for s in range(100))
        assert hits >= 95

    def test_single_sample(self):
        c = correction_curve([ScoredSample(0, 0.4, 0.9, 0.1)])
        np.testing.assert_allclose(c.mious, [0.4, 0.9])
        assert c.rel_auc == 1.0

    @pytest.mark.parametrize("bad", [
        [],
        [ScoredSample(0, 0.5, 0.5, 0.1), ScoredSample(0, 0.5, 0.6, 0.2)],
        [ScoredSample(0, 0.5, 0.5, np.nan), ScoredSample(1, 0.5, 0.6, 0.2)],
    ])
    def test_rejects_invalid(self, bad):
        with pytest.raises(ValueError):
            correction_curve(bad)


class TestScenarios:
    T = {"L": 0.9, "B+": 0.85, "S": 0.8, "T": 0.7, "refined": 0.95, "sam_selected": 0.6}

    def test_pairs(self):
        assert scenario_ious(self.T, "T", "model-swap") == (0.7, 0.9)
        assert scenario_ious(self.T, "T", "prompt-refine") == (0.7, 0.95)
        assert scenario_ious(self.T, "T", "task-supervise") == (0.6, 0.7)
        assert scenario_ious(self.T, "S", "gt-correct") == (0.8, 1.0)

    def test_unknown(self):
        with pytest.raises(ValueError):
            scenario_ious(self.T, "T", "relabel")

    def test_names(self):
        assert SCENARIOS == ("model-swap", "prompt-refine", "task-supervise", "gt-correct")


class TestPearson:
    def test_perfect(self):
        x = np.arange(10.0)
        assert pearson(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-15)
        assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-15)

    def test_hand_value(self):
        assert pearson([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-15)

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=30))
    def test_matches_oracle(self, pairs):
        xs, ys = zip(*pairs)
        if np.ptp(xs) < 1e-3 or np.ptp(ys) < 1e-3:
            return
        assert pearson(xs, ys) == pytest.approx(oracles.pearson(xs, ys), abs=1e-9)

    def test_zero_variance(self):
        with pytest.raises(ValueError):
            pearson([1, 1, 1], [1, 2, 3])


class TestCorrelationMatrix:
    def test_unit_diagonal_and_symmetry(self):
        rng = np.random.default_rng(0)
        m = correlation_matrix({k: rng.random(40) for k in "abcd"})
        assert np.all(np.abs(np.diag(m.values) - 1.0) <= 1e-12)
        assert np.all(np.abs(m.values - m.values.T) <= 1e-12)

    def test_undefined_cells(self):
        m = correlation_matrix({"a": [1.0, 2.0, 3.0], "c": [5.0, 5.0, 5.0]})
        assert np.isnan(m.values[0, 1]) and np.isnan(m.values[1, 1])
        rows = list(csv.reader(io.StringIO(m.to_csv())))
        assert rows[0] == ["", "a", "c"]
        assert rows[1] == ["a", "1.000000", "undefined"]
        assert len(m.undefined) == 2

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            correlation_matrix({"a": [1, 2, 3], "b": [1, 2]})


class TestCsv:
    def test_curves_csv(self):
        c = correction_curve(samples([0.5, 0.9], [1.0, 1.0], [0.8, 0.1]))
        rows = list(csv.reader(io.StringIO(curves_to_csv({"m": c}))))
        assert rows[0] == ["ratio", "m", "oracle", "worst"]
        assert rows[1:] == [["0.000000", "0.700000", "0.700000", "0.700000"],
                            ["0.500000", "0.950000", "0.950000", "0.750000"],
                            ["1.000000", "1.000000", "1.000000", "1.000000"]]

    def test_rel_auc_table(self):
        c = correction_curve(samples([0.5, 0.9], [1.0, 1.0], [0.8, 0.1]))
        text = rel_auc_table_csv({("m", "gt-correct"): c})
        assert text == "method,scenario,auc,rel_auc_percent\nm,gt-correct,0.900000,100.00\n"


class TestBench:
    def test_structure_and_ordering(self):
        r = bench_uq_overhead(mask_size=256, repeats=10)
        assert tuple(r["median"]) == ("sam", "usam_head", "usam_all", "entropy", "mc_T5")
        assert all(len(t) == 10 for t in r["times"].values())
        assert r["median"]["mc_T5"] >= 3 * r["median"]["sam"]

    def test_requires_ten_repeats(self):
        with pytest.raises(ValueError):
            bench_uq_overhead(mask_size=64, repeats=3)
