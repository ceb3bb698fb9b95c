import json

import numpy as np
import pytest

from buda.errors import ContractError
from buda.metrics import (ABSENT, METRIC_FIELDS, ConfusionMatrix, MetricsReport, accumulate_confusion,
                          gzsl_report, harmonic_mean, per_class_iou, reports_to_csv, subset_metrics)
from buda.tensor import Rng


def fixture_cm():
    # gt0: 8 right, 2 as class 1; gt1: 5 right, 5 as class 2; gt2: 10 right
    return ConfusionMatrix(3, np.array([[8, 2, 0], [0, 5, 5], [0, 0, 10]]))


# ---------------------------------------------------------------- confusion

def test_perfect_prediction_diagonal():
    y = Rng(0).integers(0, 4, size=100)
    cm = accumulate_confusion(ConfusionMatrix(4), y, y)
    assert np.trace(cm.counts) == 100 and cm.total == 100


def test_absent_ground_truth_is_skipped():
    cm = accumulate_confusion(ConfusionMatrix(3), np.array([0, 1, 2]), np.full(3, ABSENT))
    assert cm.total == 0


def test_hand_counted_fixture():
    gt = np.array([0] * 10 + [1] * 10 + [2] * 10).reshape(5, 6)
    pred = np.array([0] * 8 + [1] * 2 + [1] * 5 + [2] * 5 + [2] * 10).reshape(5, 6)
    cm = accumulate_confusion(ConfusionMatrix(3), pred, gt)
    np.testing.assert_array_equal(cm.counts, fixture_cm().counts)


def test_out_of_range_ids_raise():
    with pytest.raises(ContractError):
        accumulate_confusion(ConfusionMatrix(3), np.array([3]), np.array([0]))
    with pytest.raises(ContractError):
        accumulate_confusion(ConfusionMatrix(3), np.array([0]), np.array([5]))


def test_merge_is_elementwise_sum():
    a, b = fixture_cm(), ConfusionMatrix(3, np.eye(3, dtype=np.int64))
    np.testing.assert_array_equal(a.merge(b).counts, a.counts + b.counts)


# ---------------------------------------------------------------- subsets

def test_identity_cm_is_perfect():
    pa, ma, miou, empty = subset_metrics(ConfusionMatrix(3, np.eye(3, dtype=np.int64) * 4), [0, 1, 2])
    assert (pa, ma, miou, empty) == (100.0, 100.0, 100.0, False)


def test_fixture_subset_values():
    pa, ma, miou, _ = subset_metrics(fixture_cm(), {0, 1})
    assert pa == pytest.approx(65.0)
    assert ma == pytest.approx(65.0)
    assert miou == pytest.approx((0.8 + 5 / 12) / 2 * 100)
    assert miou == pytest.approx(60.83, abs=0.005)


def test_scale_invariance():
    cm = fixture_cm()
    scaled = ConfusionMatrix(3, cm.counts * 7)
    for subset in ({0, 1}, {2}, {0, 1, 2}):
        assert subset_metrics(cm, subset) == pytest.approx(subset_metrics(scaled, subset))


def test_empty_subset_is_flagged():
    cm = ConfusionMatrix(3, np.array([[5, 0, 0], [0, 5, 0], [0, 0, 0]]))
    assert subset_metrics(cm, {2}) == (0.0, 0.0, 0.0, True)
    with pytest.raises(ContractError):
        subset_metrics(cm, [])


def test_iou_never_exceeds_recall():
    r = Rng(1)
    for i in range(200):
        counts = r.child(i).integers(0, 20, size=(4, 4))
        cm = ConfusionMatrix(4, counts)
        iou = per_class_iou(cm)
        rows = counts.sum(axis=1)
        for c in range(4):
            if rows[c]:
                assert iou[c] <= counts[c, c] / rows[c] + 1e-15


# ---------------------------------------------------------------- harmonic mean

def test_harmonic_basics():
    assert harmonic_mean(37.5, 37.5) == pytest.approx(37.5)
    assert harmonic_mean(0.0, 80.0) == 0.0
    assert harmonic_mean(0.0, 0.0) == 0.0
    with pytest.raises(ContractError):
        harmonic_mean(-1.0, 2.0)


def test_harmonic_bounds():
    r = Rng(2)
    ab = r.uniform((1000, 2)) * 100 + 1e-6
    for a, b in ab:
        h = harmonic_mean(a, b)
        assert min(a, b) - 1e-12 <= h <= (a + b) / 2 + 1e-12


@pytest.mark.parametrize("shared,private,printed", [
    (61.7, 48.2, 54.1),   # published supervised row, mIoU
    (95.1, 58.1, 72.1),   # published supervised row, PA
    (68.1, 60.0, 63.8),   # published supervised row, MA
    (56.9, 48.0, 52.1),   # published supervised row, mIoU
])
def test_harmonic_reproduces_supervised_rows(shared, private, printed):
    assert harmonic_mean(shared, private) == pytest.approx(printed, abs=0.06)


# ---------------------------------------------------------------- report

def test_identity_report_is_all_hundred():
    rep = gzsl_report(ConfusionMatrix(4, np.eye(4, dtype=np.int64) * 3), [0, 1], [2, 3])
    assert all(v == 100.0 for v in rep.metrics().values())
    assert set(rep.metrics()) == set(METRIC_FIELDS)
    assert rep.pixel_counts == {"shared": 6, "private": 6, "total": 12}


def test_report_on_fixture():
    rep = gzsl_report(fixture_cm(), [0, 1], [2])
    assert rep.shared_PA == pytest.approx(65.0)
    assert rep.private_PA == pytest.approx(100.0)
    assert rep.private_mIoU == pytest.approx(100 * 10 / 15)
    assert rep.hPA == pytest.approx(2 * 65 * 100 / 165)
    assert all(0.0 <= v <= 100.0 for v in rep.metrics().values())


def test_overlapping_sets_raise():
    with pytest.raises(ContractError):
        gzsl_report(fixture_cm(), [0, 1], [1, 2])


def test_report_json_round_trip_and_csv():
    rep = gzsl_report(fixture_cm(), [0, 1], [2])
    back = MetricsReport.from_dict(json.loads(rep.to_json()))
    assert back == rep
    text = reports_to_csv([{"run": "a", **rep.metrics()}], ["run", *METRIC_FIELDS])
    header, row = text.strip().split("\n")
    assert header.split(",") == ["run", *METRIC_FIELDS]
    assert float(row.split(",")[1]) == rep.shared_PA
