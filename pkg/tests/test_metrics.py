import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moddrop_pp.errors import ConfigError, DegenerateError, ShapeError
from moddrop_pp.metrics import (
    MetricsReport,
    aggregate,
    connected_components,
    format_table,
    lesion_metrics,
    overall_score,
    read_report_csv,
    subject_metrics,
    volume_correlation,
    voxel_metrics,
    write_report_csv,
)
from oracles import corr_oracle, flood_fill_labels, lesion_oracle, same_partition, voxel_oracle


def mask(shape, coords):
    m = np.zeros(shape, dtype=bool)
    for c in coords:
        m[c] = True
    return m


class TestVoxel:
    def test_perfect(self):
        m = mask((4, 4), [(0, 0), (1, 1)])
        assert voxel_metrics(m, m) == (1.0, 1.0, 1.0, 0.0)

    def test_disjoint(self):
        assert voxel_metrics(mask((4, 4), [(0, 0)]), mask((4, 4), [(3, 3)]))[0] == 0.0

    def test_hand_count(self):
        gt = mask((4, 4), [(0, 0), (0, 1), (0, 2), (0, 3)])
        pred = mask((4, 4), [(0, 0), (0, 1), (0, 2), (2, 0), (2, 1), (2, 2)])
        dsc, ppv, tpr, vd = voxel_metrics(pred, gt)
        assert (dsc, ppv, tpr, vd) == pytest.approx((0.6, 0.5, 0.75, 0.5), abs=1e-15)

    def test_empty_conventions(self):
        empty, one = np.zeros((3, 3), bool), mask((3, 3), [(1, 1)])
        assert voxel_metrics(empty, empty) == (1.0, 1.0, 1.0, 0.0)
        assert voxel_metrics(empty, one) == (0.0, 1.0, 0.0, 1.0)
        assert math.isnan(voxel_metrics(one, empty)[3])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            voxel_metrics(np.zeros((3, 3)), np.zeros((3, 4)))


class TestComponents:
    def test_empty(self):
        assert connected_components(np.zeros((5, 5)))[1] == 0

    def test_diagonal_touch(self):
        assert connected_components(mask((3, 3), [(0, 0), (1, 1)]))[1] == 1

    def test_3d_corner_touch(self):
        assert connected_components(mask((2, 2, 2), [(0, 0, 0), (1, 1, 1)]))[1] == 1

    def test_flood_fill_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m = rng.random((16, 16)) > 0.6
            labels, n = connected_components(m)
            ref, n_ref = flood_fill_labels(m)
            assert n == n_ref and same_partition(labels, ref)

    def test_dim_mismatch(self):
        with pytest.raises(ConfigError):
            connected_components(np.zeros((4, 4)), "3d_26")
        with pytest.raises(ConfigError):
            connected_components(np.zeros((4, 4)), "2d_4")


class TestLesion:
    def test_perfect(self):
        m = mask((6, 6), [(0, 0), (4, 4)])
        assert lesion_metrics(m, m) == (1.0, 0.0)

    def test_empty_prediction(self):
        assert lesion_metrics(np.zeros((4, 4)), mask((4, 4), [(1, 1)])) == (0.0, 0.0)

    def test_hand_matched(self):
        gt = mask((8, 8), [(0, 0), (5, 5)])
        pred = mask((8, 8), [(0, 0), (0, 4), (7, 0)])
        ltpr, lfpr = lesion_metrics(pred, gt)
        assert ltpr == 0.5
        assert lfpr == pytest.approx(2 / 3, abs=1e-15)

    def test_min_overlap(self):
        gt = mask((5, 5), [(0, 0), (0, 1)])
        pred = mask((5, 5), [(0, 1)])
        assert lesion_metrics(pred, gt, min_overlap=2) == (0.0, 1.0)


class TestCorrelation:
    def test_self(self):
        assert volume_correlation([1, 5, 2], [1, 5, 2]) == pytest.approx(1.0, abs=1e-15)

    def test_anti(self):
        assert volume_correlation([3, 2, 1], [1, 2, 3]) == pytest.approx(-1.0, abs=1e-15)

    def test_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a, b = rng.normal(size=10), rng.normal(size=10)
            assert abs(volume_correlation(a, b) - corr_oracle(a, b)) < 1e-12

    def test_degenerate(self):
        with pytest.raises(DegenerateError):
            volume_correlation([2, 2, 2], [1, 2, 3])
        with pytest.raises(DegenerateError):
            volume_correlation([1], [1])


class TestScore:
    def test_perfect(self):
        assert overall_score(dict(dsc=1, ppv=1, lfpr=0, ltpr=1, corr=1)) == 1.0

    def test_worst(self):
        assert overall_score(dict(dsc=0, ppv=0, lfpr=1, ltpr=0, corr=0)) == 0.0

    def test_hand_value(self):
        v = overall_score(dict(dsc=0.704, ppv=0.8, lfpr=0.2, ltpr=0.7, corr=0.9))
        assert abs(v - 0.788) < 1e-12

    def test_missing(self):
        with pytest.raises(ConfigError):
            overall_score(dict(dsc=1, ppv=1, lfpr=0, ltpr=1))


class TestAggregate:
    def subjects(self):
        rng = np.random.default_rng(4)
        out = []
        for i in range(5):
            gt = rng.random((12, 12)) > 0.8
            pred = gt ^ (rng.random((12, 12)) > 0.9)
            out.append(subject_metrics(f"s{i}", pred, gt))
        return out

    def test_means(self):
        subs = self.subjects()
        rep = aggregate(subs)
        assert rep.dsc == pytest.approx(np.mean([s.dsc for s in subs]), abs=1e-15)
        assert rep.sc == pytest.approx(overall_score(rep), abs=1e-15)

    def test_degenerate_corr_reported(self):
        subs = [subject_metrics("a", np.zeros((4, 4)), mask((4, 4), [(0, 0)])),
                subject_metrics("b", np.zeros((4, 4)), mask((4, 4), [(0, 0), (1, 1)]))]
        with pytest.warns(RuntimeWarning, match="correlation"):
            rep = aggregate(subs)
        assert math.isnan(rep.corr)
        assert rep.sc == overall_score(dict(rep.row(), corr=0.0))

    def test_undefined_vd_excluded(self):
        subs = [subject_metrics("a", mask((4, 4), [(0, 0)]), np.zeros((4, 4))),
                subject_metrics("b", mask((4, 4), [(1, 1)]), mask((4, 4), [(1, 1), (2, 2)])),
                subject_metrics("c", mask((4, 4), [(3, 3)]), mask((4, 4), [(3, 3)]))]
        with pytest.warns(RuntimeWarning, match="undefined vd"):
            rep = aggregate(subs)
        assert rep.vd == 0.25

    def test_empty(self):
        with pytest.raises(DegenerateError):
            aggregate([])

    def test_csv_round_trip(self, tmp_path):
        rep = aggregate(self.subjects())
        write_report_csv(tmp_path / "r.csv", {"1111": rep, "0100": rep})
        back = read_report_csv(tmp_path / "r.csv")
        assert list(back) == ["1111", "0100"]
        assert back["0100"] == rep.row()
        assert "1111" in format_table(back) and "0100" in format_table({"0100": rep})

    def test_csv_bad_header(self, tmp_path):
        (tmp_path / "r.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ConfigError):
            read_report_csv(tmp_path / "r.csv")


masks2d = arrays(bool, (6, 6))


@settings(max_examples=60, deadline=None)
@given(masks2d, masks2d)
def test_metrics_match_oracles(pred, gt):
    got = voxel_metrics(pred, gt)
    ref = voxel_oracle(pred, gt)
    for a, b in zip(got, ref):
        assert (math.isnan(a) and math.isnan(b)) or a == b
    assert lesion_metrics(pred, gt) == lesion_oracle(pred, gt)


@settings(max_examples=60, deadline=None)
@given(masks2d, masks2d)
def test_metric_ranges(pred, gt):
    dsc, ppv, tpr, _ = voxel_metrics(pred, gt)
    ltpr, lfpr = lesion_metrics(pred, gt)
    assert all(0.0 <= v <= 1.0 for v in (dsc, ppv, tpr, ltpr, lfpr))
    assert voxel_metrics(gt, pred)[0] == dsc


def test_report_row_order():
    rep = MetricsReport(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
    assert list(rep.row().values()) == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
