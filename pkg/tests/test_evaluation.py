import itertools

import numpy as np
import pytest

from cascade_seg.evaluation import (
    COHORT_ID,
    RegionScores,
    cohort_report,
    metrics_from_counts,
    quantiles,
    read_report,
    score_region,
    score_subject,
)
from cascade_seg.volume_core import GeometryError, Volume


def b(a):
    return Volume(np.asarray(a, dtype=np.uint8), kind="binary")


def naive_counts(pred, truth):
    tp = fp = fn = tn = 0
    for idx in itertools.product(*map(range, pred.shape)):
        p, t = bool(pred[idx]), bool(truth[idx])
        tp += p and t
        fp += p and not t
        fn += t and not p
        tn += not p and not t
    return tp, fp, fn, tn


def scores(d, s=1.0):
    return RegionScores("X", 0, 0, 0, 0, d, s, 1.0)


class TestScoreRegion:
    def test_identity(self):
        m = np.zeros((4, 4, 4)); m[1:3, 1:3, 1:3] = 1
        s = score_region(b(m), b(m))
        assert (s.dice, s.sensitivity, s.specificity) == (1.0, 1.0, 1.0)

    def test_three_voxel_case(self):
        s = score_region(b([[[1, 1, 0]]]), b([[[0, 1, 1]]]))
        assert (s.tp, s.fp, s.fn, s.tn) == (1, 1, 1, 0)
        assert s.dice == 0.5

    def test_both_empty(self):
        z = np.zeros((2, 2, 2))
        s = score_region(b(z), b(z))
        assert s.dice == 1.0 and s.sensitivity == 1.0 and s.specificity == 1.0

    def test_empty_truth_nonempty_pred(self):
        z = np.zeros((2, 2, 2)); p = z.copy(); p[0, 0, 0] = 1
        s = score_region(b(p), b(z))
        assert s.dice == 0.0 and s.sensitivity == 0.0

    def test_geometry_mismatch(self):
        with pytest.raises(GeometryError):
            score_region(b(np.zeros((2, 2, 2))), b(np.zeros((2, 2, 3))))

    def test_matches_naive_loop(self, rng):
        for _ in range(10):
            shape = tuple(rng.integers(1, 12, 3))
            p, t = rng.random(shape) > 0.6, rng.random(shape) > 0.5
            s = score_region(b(p), b(t))
            assert (s.tp, s.fp, s.fn, s.tn) == naive_counts(p, t)
            assert s.tp + s.fp + s.fn + s.tn == p.size

    def test_properties(self, rng):
        for _ in range(20):
            p, t = rng.random((8, 8, 8)) > 0.5, rng.random((8, 8, 8)) > 0.4
            s, r = score_region(b(p), b(t)), score_region(b(t), b(p))
            assert s.dice == pytest.approx(r.dice)
            comp = score_region(b(~p), b(~t))
            assert s.sensitivity == pytest.approx(comp.specificity)
            assert 0 <= s.dice <= 1
            assert (s.dice == 1.0) == bool(np.array_equal(p, t))

    def test_dice_monotone_removing_false_positives(self, rng):
        t = rng.random((8, 8, 8)) > 0.5
        p = rng.random((8, 8, 8)) > 0.5
        base = score_region(b(p), b(t)).dice
        fp_idx = np.argwhere(p & ~t)
        q = p.copy()
        for idx in fp_idx[: len(fp_idx) // 2]:
            q[tuple(idx)] = False
        assert score_region(b(q), b(t)).dice >= base


class TestScoreSubject:
    def test_identity(self, phantom):
        s = score_subject(phantom.truth, phantom.truth)
        assert {k: v.dice for k, v in s.items()} == {"ET": 1.0, "WT": 1.0, "TC": 1.0}

    def test_core_relabelled_as_edema(self, phantom):
        lab = phantom.truth.data.copy()
        lab[np.isin(lab, (1, 4))] = 2
        s = score_subject(phantom.truth.with_data(lab), phantom.truth)
        assert s["WT"].dice == 1.0 and s["TC"].dice == 0.0 and s["ET"].dice == 0.0

    def test_random_vs_naive(self, phantom, rng):
        pred = rng.choice([0, 1, 2, 4], size=phantom.truth.shape, p=[0.7, 0.1, 0.1, 0.1])
        s = score_subject(phantom.truth.with_data(pred), phantom.truth)
        t = phantom.truth.data
        for region, labs in (("WT", (1, 2, 4)), ("TC", (1, 4)), ("ET", (4,))):
            assert (s[region].tp, s[region].fp, s[region].fn, s[region].tn) == naive_counts(np.isin(pred, labs), np.isin(t, labs))

    def test_invalid_labels(self, phantom):
        with pytest.raises(ValueError):
            score_subject(Volume(np.full(phantom.truth.shape, 3), kind="intensity"), phantom.truth)


class TestCohort:
    def test_single_subject(self, phantom):
        s = score_subject(phantom.truth, phantom.truth)
        rep = cohort_report({"a": s})
        for region in ("ET", "WT", "TC"):
            assert rep.mean(region) == 1.0

    def test_quartiles_against_sorted_oracle(self):
        dice = [0.9, 0.2, 0.5, 0.7, 0.4]
        per = {f"s{i}": {r: scores(d) for r in ("ET", "WT", "TC")} for i, d in enumerate(dice)}
        rep = cohort_report(per)
        ordered = sorted(dice)  # 0.2 0.4 0.5 0.7 0.9 -> positions 0, 1, 2, 3, 4
        expected = {"min": ordered[0], "q1": ordered[1], "median": ordered[2], "q3": ordered[3], "max": ordered[4]}
        row = next(r for r in rep.summary if r["region"] == "WT" and r["metric"] == "dice")
        for k, v in expected.items():
            assert row[k] == pytest.approx(v)
        assert row["mean"] == pytest.approx(sum(dice) / 5)

    def test_quantiles_interpolate(self):
        q = quantiles([1.0, 2.0, 3.0, 4.0])
        assert q["q1"] == pytest.approx(1.75) and q["median"] == pytest.approx(2.5)

    def test_csv_format(self, tmp_path, phantom):
        s = score_subject(phantom.truth, phantom.truth)
        path = tmp_path / "report.csv"
        cohort_report({"a": s, "b": s}, path, tmp_path / "plots")
        rows = read_report(path)
        assert len(rows) == 3 * 2 + 3
        assert list(rows[0]) == ["subject_id", "region", "dice", "sensitivity", "specificity", "tp", "fp", "fn", "tn"]
        assert sum(r["subject_id"] == COHORT_ID for r in rows) == 3
        assert (tmp_path / "report_summary.csv").is_file()
        assert sorted(p.name for p in (tmp_path / "plots").iterdir()) == ["boxplot_ET.png", "boxplot_TC.png", "boxplot_WT.png"]

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            cohort_report({})


def test_metric_formulas():
    d, s, sp = metrics_from_counts(tp=3, fp=1, fn=2, tn=10)
    assert d == pytest.approx(6 / 9) and s == pytest.approx(3 / 5) and sp == pytest.approx(10 / 11)
