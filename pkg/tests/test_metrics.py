import math

import numpy as np
import pytest

from ctpseg import metrics as Mt
from ctpseg.errors import EmptyGroup, EmptySurface, ShapeMismatch


def _surf(points, spacing=(1.0, 1.0)):
    return Mt.SurfaceSet(np.asarray(points), spacing)


def _random_pair(rng, shape=(16, 16)):
    while True:
        x = rng.random(shape) < rng.uniform(0.1, 0.5)
        y = rng.random(shape) < rng.uniform(0.1, 0.5)
        if x.any() and y.any():
            return x, y


# -- DSC -------------------------------------------------------------------------


def test_dsc_examples():
    x = np.zeros(10, bool)
    y = np.zeros(10, bool)
    x[[0, 1, 2, 3]] = True
    y[[1, 2, 3, 4, 5, 6]] = True
    assert Mt.dsc(x, y) == pytest.approx(0.6)
    assert Mt.dsc(x, x) == 1.0
    assert Mt.dsc(x, ~x) == 0.0
    assert Mt.dsc(np.zeros(4), np.zeros(4)) == 1.0
    with pytest.raises(ShapeMismatch):
        Mt.dsc(np.zeros(3), np.zeros(4))


def test_dsc_symmetric_and_bounded(rng):
    for _ in range(50):
        x, y = _random_pair(rng)
        d = Mt.dsc(x, y)
        assert d == Mt.dsc(y, x) and 0.0 <= d <= 1.0


# -- surfaces and distances -----------------------------------------------------


def test_surface_examples():
    m = np.zeros((5, 5), bool)
    m[2, 2] = True
    assert Mt.extract_surface(m).coords.tolist() == [[2, 2]]
    m[1:4, 1:4] = True
    s = Mt.extract_surface(m)
    assert len(s) == 8 and [2, 2] not in s.coords.tolist()
    assert len(Mt.extract_surface(np.zeros((4, 4)))) == 0
    # border counts as background: a full image is all surface on its rim
    assert len(Mt.extract_surface(np.ones((3, 3)))) == 8
    assert len(Mt.extract_surface(np.ones((3, 3, 3)))) == 26


def test_distance_examples():
    a, b = _surf([[0, 0]]), _surf([[3, 4]])
    assert Mt.hausdorff(a, b) == 5.0
    assert Mt.assd(a, b) == 5.0
    assert Mt.hausdorff(a, a) == 0.0 and Mt.assd(b, b) == 0.0
    with pytest.raises(EmptySurface):
        Mt.hausdorff(a, _surf(np.zeros((0, 2))))


def test_anisotropic_spacing():
    a, b = _surf([[0, 0, 0]], (5.0, 1.0, 1.0)), _surf([[1, 0, 0]], (5.0, 1.0, 1.0))
    assert Mt.hausdorff(a, b) == 5.0
    assert Mt.axis_spacing((0.5, 0.7, 5.0)) == (5.0, 0.7, 0.5)
    assert Mt.axis_spacing((0.5, 0.7, 5.0), ndim=2) == (0.7, 0.5)


def test_assd_symmetric_and_dominated_by_hd(rng):
    for _ in range(50):
        x, y = _random_pair(rng)
        xs, ys = Mt.extract_surface(x), Mt.extract_surface(y)
        assert Mt.assd(xs, ys) == pytest.approx(Mt.assd(ys, xs), abs=1e-12)
        assert Mt.hausdorff(xs, ys) >= Mt.assd(xs, ys) >= 0.0


def test_translation_invariance(rng):
    for _ in range(20):
        x, y = _random_pair(rng, (12, 12))
        dy, dx = rng.integers(1, 6, 2)
        big_x = np.zeros((20, 20), bool)
        big_y = np.zeros((20, 20), bool)
        big_x[dy : dy + 12, dx : dx + 12] = x
        big_y[dy : dy + 12, dx : dx + 12] = y
        # pad the originals too so the border treatment matches
        px, py = np.pad(x, 4), np.pad(y, 4)
        a = Mt.evaluate_scan(px, py, (1.0, 1.0, 1.0))
        b = Mt.evaluate_scan(big_x, big_y, (1.0, 1.0, 1.0))
        for m in Mt.METRICS:
            assert a.value(m) == pytest.approx(b.value(m), abs=1e-12)


# -- precision, recall, AVD -------------------------------------------------------


def test_precision_recall_examples():
    pred = np.array([1, 1, 1, 1, 1, 0, 0], bool)
    truth = np.array([1, 1, 1, 0, 0, 1, 0], bool)
    assert Mt.precision_recall(pred, truth) == (0.6, 0.75)
    assert Mt.precision_recall(truth, truth) == (1.0, 1.0)
    p, r = Mt.precision_recall(np.zeros(7, bool), truth)
    assert math.isnan(p) and r == 0.0


def test_avd_examples():
    x = np.zeros(20, bool)
    y = np.zeros(20, bool)
    x[:10] = True
    y[:4] = True
    assert Mt.avd(x, y, (1, 1, 5)) == pytest.approx(0.030)
    assert Mt.avd(x, x, (1, 1, 5)) == 0.0


# -- records and aggregation -----------------------------------------------------


def test_evaluate_scan_empty_policy():
    empty = np.zeros((2, 4, 4), bool)
    full = empty.copy()
    full[0, 1:3, 1:3] = True
    both = Mt.evaluate_scan(empty, empty)
    assert both.dsc == 1.0 and both.hd == 0.0 and both.assd == 0.0
    one = Mt.evaluate_scan(empty, full)
    assert one.dsc == 0.0 and math.isnan(one.hd) and not one.defined("hd") and not one.defined("precision")
    assert one.recall == 0.0


def test_aggregate_examples():
    agg = Mt.aggregate_values([0.64, 0.42, 0.48, 0.55, 0.58])
    assert agg.mean == pytest.approx(0.534) and round(agg.std, 3) == 0.086
    assert abs(agg.mean - 0.54) <= 0.01 and abs(agg.std - 0.09) <= 0.01
    one = Mt.aggregate_values([0.7])
    assert one.std == 0.0 and one.single_sample
    assert Mt.aggregate_values([0.3] * 4).std == 0.0
    with pytest.raises(EmptyGroup):
        Mt.aggregate_values([])


def test_aggregate_report_groups_and_exclusions(rng):
    records = []
    for fold in range(3):
        for i in range(4):
            x, y = _random_pair(rng, (6, 8, 8))
            records.append(Mt.evaluate_scan(x, y, scan_id=f"f{fold}_{i}", fold=fold))
    records.append(Mt.evaluate_scan(np.zeros((2, 4, 4)), np.ones((2, 4, 4)), scan_id="empty", fold=0))
    overall = Mt.aggregate_report(records)
    assert overall.groups["overall"]["hd"].excluded == 1
    assert overall.groups["overall"]["dsc"].count == 13
    for m in Mt.METRICS:
        vals = [r.value(m) for r in records if r.defined(m)]
        assert min(vals) - 1e-12 <= overall.groups["overall"][m].mean <= max(vals) + 1e-12
    per_fold = Mt.aggregate_report(records, "per-fold")
    assert sorted(per_fold.groups) == [0, 1, 2]
    with pytest.raises(EmptyGroup):
        Mt.aggregate_report([])


def test_metrics_csv_round_trip(tmp_path, rng):
    recs = [Mt.evaluate_scan(*_random_pair(rng, (3, 8, 8)), scan_id=f"s{i}") for i in range(3)]
    recs.append(Mt.evaluate_scan(np.zeros((2, 3, 3)), np.ones((2, 3, 3)), scan_id="e"))
    path = Mt.write_metrics_csv(recs, tmp_path / "metrics.csv")
    assert path.read_text().splitlines()[0] == ",".join(Mt.CSV_COLUMNS)
    back = Mt.read_metrics_csv(path)
    for a, b in zip(recs, back):
        assert a.flags == b.flags
        for m in Mt.METRICS:
            assert (math.isnan(a.value(m)) and math.isnan(b.value(m))) or a.value(m) == b.value(m)


def test_report_md(tmp_path):
    dscs = [0.64, 0.42, 0.48, 0.55, 0.58]
    recs = [Mt.MetricRecord(f"s{i}", d, 1.0, 0.5, 0.6, 0.7, 0.1, [], i) for i, d in enumerate(dscs)]
    text = Mt.write_report_md(tmp_path / "report.md", recs).read_text()
    assert "| **Total** | **0.53 ± 0.09** |" in text
    assert "| 2 | 0.42 |" in text
    assert "mean over scans" in text
