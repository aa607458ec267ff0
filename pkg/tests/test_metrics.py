import csv
import math

import numpy as np
import pytest

from fmdacl.metrics import (MetricAccumulator, MetricsReport, boundary_pixels,
                            dice_metric, f1_counts, f1_from_counts, f1_metric,
                            nsd_metric, overall_score)

# ---------------------------------------------------------------------------
# Independent brute-force reference implementations (pure python sets/loops;
# no shared code with the library beyond numpy array access)
# ---------------------------------------------------------------------------


def brute_boundary(region: np.ndarray) -> set:
    h, w = region.shape
    out = set()
    for i in range(h):
        for j in range(w):
            if not region[i, j]:
                continue
            for a, b in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                if a < 0 or b < 0 or a >= h or b >= w or not region[a, b]:
                    out.add((i, j))
                    break
    return out


def brute_dice_class(pred: np.ndarray, gt: np.ndarray, c: int):
    p, g = pred == c, gt == c
    ps, gs = int(p.sum()), int(g.sum())
    if ps == 0 and gs == 0:
        return None
    inter = int((p & g).sum())
    return 100.0 * 2.0 * inter / (ps + gs)


def brute_nsd_class(pred: np.ndarray, gt: np.ndarray, c: int, tol: float):
    bp = brute_boundary(pred == c)
    bg = brute_boundary(gt == c)
    if not bp and not bg:
        return None
    if not bp or not bg:
        return 0.0
    tol2 = tol * tol  # compare squared integers against tol^2: no rounding
    hits = sum(1 for q in bp
               if min((q[0] - r[0]) ** 2 + (q[1] - r[1]) ** 2 for r in bg) <= tol2)
    hits += sum(1 for r in bg
                if min((q[0] - r[0]) ** 2 + (q[1] - r[1]) ** 2 for q in bp) <= tol2)
    return 100.0 * hits / (len(bp) + len(bg))


def brute_per_class(fn, pred, gt, c_seg, *args):
    vals = [fn(pred, gt, c, *args) for c in range(1, c_seg)]
    return np.array([math.nan if v is None else v for v in vals])


# ---------------------------------------------------------------------------
# Criterion: exact agreement with brute force on random mask pairs
# ---------------------------------------------------------------------------


def test_dice_and_nsd_match_brute_force_exactly():
    rng = np.random.default_rng(42)
    c_seg = 3
    for trial in range(100):
        pred = rng.integers(0, c_seg, size=(12, 12))
        gt = rng.integers(0, c_seg, size=(12, 12))
        if trial % 10 == 0:
            pred[pred == 2] = 0          # exercise empty/one-sided classes
        if trial % 17 == 0:
            gt[:] = 0
        d = dice_metric(pred, gt, c_seg)
        bd = brute_per_class(brute_dice_class, pred, gt, c_seg)
        assert np.array_equal(d.per_class, bd, equal_nan=True), trial
        included = bd[~np.isnan(bd)]
        if included.size:
            assert d.mean == float(included.mean())
        else:
            assert math.isnan(d.mean)
        for tol in (0.0, 0.5, 1.0, 2.0):
            s = nsd_metric(pred, gt, c_seg, tolerance_px=tol)
            bs = brute_per_class(brute_nsd_class, pred, gt, c_seg, tol)
            assert np.array_equal(s.per_class, bs, equal_nan=True), (trial, tol)


# ---------------------------------------------------------------------------
# Boundary extraction
# ---------------------------------------------------------------------------


def test_boundary_single_pixel_is_its_own_boundary():
    m = np.zeros((5, 5), dtype=bool)
    m[2, 2] = True
    assert np.array_equal(boundary_pixels(m), m)


def test_boundary_solid_block_is_a_ring():
    m = np.zeros((5, 5), dtype=bool)
    m[1:4, 1:4] = True
    b = boundary_pixels(m)
    want = m.copy()
    want[2, 2] = False
    assert np.array_equal(b, want)


def test_boundary_full_image_counts_border_as_outside():
    m = np.ones((4, 6), dtype=bool)
    b = boundary_pixels(m)
    inner = np.zeros((4, 6), dtype=bool)
    inner[1:-1, 1:-1] = True
    assert np.array_equal(b, m & ~inner)


# ---------------------------------------------------------------------------
# Hand-value metric examples
# ---------------------------------------------------------------------------


def test_perfect_prediction_scores_100():
    rng = np.random.default_rng(1)
    m = rng.integers(0, 4, size=(16, 16))
    assert dice_metric(m, m, 4).mean == 100.0
    assert nsd_metric(m, m, 4, 1.0).mean == 100.0


def test_disjoint_regions_score_zero():
    pred = np.zeros((16, 16), dtype=np.int64)
    gt = np.zeros((16, 16), dtype=np.int64)
    pred[1:4, 1:4] = 1
    gt[10:14, 10:14] = 1
    assert dice_metric(pred, gt, 2).mean == 0.0
    assert nsd_metric(pred, gt, 2, 2.0).mean == 0.0


def test_dice_two_versus_one_pixel():
    pred = np.zeros((8, 8), dtype=np.int64)
    gt = np.zeros((8, 8), dtype=np.int64)
    pred[3, 3] = pred[3, 4] = 1
    gt[3, 3] = 1
    got = dice_metric(pred, gt, 2).mean
    assert abs(got - 200.0 / 3.0) < 1e-9
    assert abs(got - 66.667) < 1e-2


def test_nsd_shifted_square():
    pred = np.zeros((16, 16), dtype=np.int64)
    gt = np.zeros((16, 16), dtype=np.int64)
    pred[2:12, 2:12] = 1
    gt[2:12, 3:13] = 1
    # every boundary pixel sits within 1 px of the other boundary
    assert nsd_metric(pred, gt, 2, 1.0).mean == 100.0
    # at tolerance 0 only the 18 shared top/bottom edge pixels hit, per side
    assert nsd_metric(pred, gt, 2, 0.0).mean == 50.0


def test_one_sided_empty_class_scores_zero():
    pred = np.zeros((8, 8), dtype=np.int64)
    gt = np.zeros((8, 8), dtype=np.int64)
    gt[2:5, 2:5] = 1
    assert dice_metric(pred, gt, 2).mean == 0.0
    assert nsd_metric(pred, gt, 2, 1.0).mean == 0.0


def test_on_empty_modes():
    z = np.zeros((8, 8), dtype=np.int64)
    d_excl = dice_metric(z, z, 3, on_empty="exclude")
    assert math.isnan(d_excl.mean)
    assert np.isnan(d_excl.per_class).all()
    d_perf = dice_metric(z, z, 3, on_empty="perfect")
    assert d_perf.mean == 100.0
    with pytest.raises(ValueError, match="on_empty"):
        dice_metric(z, z, 3, on_empty="lenient")


def test_partial_exclusion_mean_over_included_only():
    pred = np.zeros((8, 8), dtype=np.int64)
    gt = np.zeros((8, 8), dtype=np.int64)
    pred[0:2, 0:2] = 1
    gt[0:2, 0:2] = 1          # class 1 perfect; class 2 absent on both sides
    d = dice_metric(pred, gt, 3)
    assert d.per_class[0] == 100.0 and math.isnan(d.per_class[1])
    assert d.mean == 100.0


def test_metric_symmetry_and_relabeling():
    rng = np.random.default_rng(2)
    pred = rng.integers(0, 3, size=(10, 10))
    gt = rng.integers(0, 3, size=(10, 10))
    assert dice_metric(pred, gt, 3).mean == dice_metric(gt, pred, 3).mean
    assert nsd_metric(pred, gt, 3, 1.0).mean == nsd_metric(gt, pred, 3, 1.0).mean
    # swapping class ids 1 <-> 2 on both masks swaps the per-class columns
    swap = np.array([0, 2, 1])
    d = dice_metric(pred, gt, 3).per_class
    ds = dice_metric(swap[pred], swap[gt], 3).per_class
    assert np.array_equal(d, ds[::-1], equal_nan=True)


def test_pair_validation_errors():
    m = np.zeros((4, 4), dtype=np.int64)
    with pytest.raises(ValueError, match="shape mismatch"):
        dice_metric(m, np.zeros((4, 5), dtype=np.int64), 3)
    with pytest.raises(ValueError, match="c_seg"):
        dice_metric(m, m, 1)
    with pytest.raises(ValueError, match="outside"):
        dice_metric(m + 7, m, 3)
    with pytest.raises(ValueError, match="tolerance_px"):
        nsd_metric(m, m, 3, tolerance_px=-1.0)


# ---------------------------------------------------------------------------
# Macro-F1
# ---------------------------------------------------------------------------


def test_f1_hand_case_two_thirds():
    # label 0 always right, label 1 always wrong, label 2 never occurs (-> 1)
    gt = np.array([[1, 1, 0], [0, 0, 0]])
    pred = np.array([[1, 0, 0], [0, 1, 0]])
    got = f1_metric(pred, gt)
    assert abs(got - 200.0 / 3.0) < 1e-9


def test_f1_perfect_and_complement():
    gt = np.array([[1, 0, 1], [0, 1, 1]])
    assert f1_metric(gt, gt) == 100.0
    assert f1_metric(1 - gt, gt) == 0.0


def test_f1_counts_values():
    gt = np.array([[1, 0], [1, 1], [0, 1]])
    pred = np.array([[1, 1], [0, 1], [0, 0]])
    counts = f1_counts(pred, gt)
    assert counts.tolist() == [[1, 0, 1], [1, 1, 1]]
    # global-counts macro F1, recomputed by hand from those counts
    want = 100.0 * ((2 * 1 / (2 * 1 + 0 + 1)) + (2 * 1 / (2 * 1 + 1 + 1))) / 2
    assert abs(f1_from_counts(counts) - want) < 1e-12


def test_f1_empty_denominator_convention():
    counts = np.array([[0, 0, 0], [5, 0, 0]])
    assert f1_from_counts(counts) == 100.0


def test_f1_global_counts_differ_from_per_image_mean():
    # one image with fp only, one with tp only: global pooling is the contract
    gt = np.array([[0], [1]])
    pred = np.array([[1], [1]])
    assert abs(f1_metric(pred, gt) - 100.0 * 2 / 3) < 1e-12


def test_f1_input_validation():
    with pytest.raises(ValueError, match="0/1"):
        f1_metric(np.array([[2, 0]]), np.array([[1, 0]]))
    with pytest.raises(ValueError, match="shape mismatch"):
        f1_metric(np.array([[1, 0]]), np.array([[1, 0, 1]]))


# ---------------------------------------------------------------------------
# Overall score
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("dsc,nsd,f1,want", [
    (65.48, 45.55, 34.20, 40.37),
    (42.90, 28.59, 31.76, 30.38),
    (45.80, 30.22, 37.35, 33.91),
    (59.66, 42.82, 30.62, 36.84),
])
def test_overall_score_published_rows(dsc, nsd, f1, want):
    assert abs(overall_score(dsc, nsd, f1, s_time=0.0) - want) <= 0.01


def test_overall_score_weights():
    assert overall_score(100, 100, 100, 100) == 100.0
    assert overall_score(100, 100, 100, 0) == 90.0
    assert abs(overall_score(0, 0, 100, 0) - 45.0) < 1e-12
    assert abs(overall_score(80, 60, 0, 0) - 0.45 * 70) < 1e-12
    assert abs(overall_score(0, 0, 0, 50) - 5.0) < 1e-12


def test_overall_score_range_validation():
    with pytest.raises(ValueError, match="dsc"):
        overall_score(101, 50, 50)
    with pytest.raises(ValueError, match="s_time"):
        overall_score(50, 50, 50, s_time=-1)


# ---------------------------------------------------------------------------
# Report and accumulator
# ---------------------------------------------------------------------------


def make_pair(rng, c_seg=4, size=10):
    return (rng.integers(0, c_seg, size=(size, size)),
            rng.integers(0, c_seg, size=(size, size)),
            rng.integers(0, 2, size=(1, 7)), rng.integers(0, 2, size=(1, 7)))


def test_accumulator_matches_direct_aggregation():
    rng = np.random.default_rng(3)
    c_seg = 4
    acc = MetricAccumulator(c_seg=c_seg, tolerance_px=1.0)
    pairs = [make_pair(rng, c_seg) for _ in range(6)]
    for pm, gm, pb, gb in pairs:
        acc.update(pm, gm, pb, gb)
    rep = acc.report()

    dsc_means = [dice_metric(pm, gm, c_seg).mean for pm, gm, _, _ in pairs]
    nsd_means = [nsd_metric(pm, gm, c_seg, 1.0).mean for pm, gm, _, _ in pairs]
    dsc_in = [v for v in dsc_means if not math.isnan(v)]
    nsd_in = [v for v in nsd_means if not math.isnan(v)]
    counts = sum(f1_counts(pb, gb) for _, _, pb, gb in pairs)
    assert abs(rep.dsc - sum(dsc_in) / len(dsc_in)) < 1e-12
    assert abs(rep.nsd - sum(nsd_in) / len(nsd_in)) < 1e-12
    assert rep.f1 == f1_from_counts(counts)
    assert rep.n_images == 6
    assert rep.score == overall_score(rep.dsc, rep.nsd, rep.f1, 0.0)


def test_accumulator_streaming_equals_any_order_of_arrival():
    rng = np.random.default_rng(4)
    pairs = [make_pair(rng) for _ in range(5)]
    a, b = MetricAccumulator(c_seg=4), MetricAccumulator(c_seg=4)
    for pm, gm, pb, gb in pairs:
        a.update(pm, gm, pb, gb)
    for pm, gm, pb, gb in reversed(pairs):
        b.update(pm, gm, pb, gb)
    ra, rb = a.report(), b.report()
    assert abs(ra.dsc - rb.dsc) < 1e-9 and abs(ra.nsd - rb.nsd) < 1e-9
    assert ra.f1 == rb.f1


def test_accumulator_oracle_prediction_scores():
    rng = np.random.default_rng(5)
    acc = MetricAccumulator(c_seg=4)
    for _ in range(4):
        m = rng.integers(0, 4, size=(12, 12))
        bits = rng.integers(0, 2, size=(1, 7))
        acc.update(m, m, bits, bits)
    assert acc.report(s_time=0.0).score == 90.0
    assert acc.report(s_time=100.0).score == 100.0
    assert acc.report().score_no_time == 90.0


def test_accumulator_degenerate_reports_zero():
    acc = MetricAccumulator(c_seg=3)
    z = np.zeros((8, 8), dtype=np.int64)
    acc.update(z, z)               # every class excluded, no bits
    rep = acc.report()
    assert rep.dsc == 0.0 and rep.nsd == 0.0 and rep.f1 == 0.0
    assert rep.score == 0.0
    assert np.isnan(rep.per_class_dsc).all()


def test_accumulator_per_class_columns():
    acc = MetricAccumulator(c_seg=3)
    a = np.zeros((8, 8), dtype=np.int64)
    a[0:4, 0:4] = 1
    b = a.copy()
    b[0:4, 0:2] = 0                # half-overlap on class 1; class 2 absent
    acc.update(a, a)
    acc.update(b, a)
    rep = acc.report()
    got_half = dice_metric(b, a, 3).per_class[0]
    assert abs(rep.per_class_dsc[0] - (100.0 + got_half) / 2) < 1e-12
    assert math.isnan(rep.per_class_dsc[1])


def test_write_csv_layout(tmp_path):
    rng = np.random.default_rng(6)
    acc = MetricAccumulator(c_seg=4, tolerance_px=2.0)
    for i in range(3):
        pm, gm, pb, gb = make_pair(rng)
        acc.update(pm, gm, pb, gb, sample_id=f"img{i}")
    out = tmp_path / "m.csv"
    rep = acc.write_csv(out, s_time=25.0)
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["id", "dsc", "nsd", "f1", "s_time", "nsd_tolerance_px",
                       "score_no_time", "score_with_time"]
    assert len(rows) == 5
    assert [r[0] for r in rows[1:4]] == ["img0", "img1", "img2"]
    assert all(r[6] == "" and r[7] == "" for r in rows[1:4])
    agg = rows[4]
    assert agg[0] == "AGGREGATE"
    assert float(agg[1]) == pytest.approx(rep.dsc, abs=1e-6)
    assert float(agg[6]) == pytest.approx(rep.score_no_time, abs=1e-6)
    assert float(agg[7]) == pytest.approx(rep.score, abs=1e-6)
    assert float(agg[7]) - float(agg[6]) == pytest.approx(2.5, abs=1e-6)


def test_report_validates_score_formula():
    with pytest.raises(ValueError):
        MetricsReport(dsc=50.0, nsd=50.0, f1=50.0, s_time=0.0, score=99.0,
                      per_class_dsc=np.array([50.0]),
                      per_class_nsd=np.array([50.0]),
                      nsd_tolerance_px=1.0, n_images=1)


def test_report_summary_mentions_both_scores():
    rep = MetricsReport(dsc=50.0, nsd=50.0, f1=50.0, s_time=0.0,
                        score=overall_score(50.0, 50.0, 50.0, 0.0),
                        per_class_dsc=np.array([50.0]),
                        per_class_nsd=np.array([50.0]),
                        nsd_tolerance_px=1.5, n_images=2)
    text = rep.summary()
    assert "score" in text and "1.5" in text
    assert f"{rep.score_no_time:.2f}" in text
