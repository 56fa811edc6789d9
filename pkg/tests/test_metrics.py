import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srgd.gridmath import ShapeError
from srgd.metrics import (LandmarkSet, MetricReport, REPORT_COLUMNS, hard_dice, mean_dice,
                          ndv, tre, wilcoxon_signed_rank)

from oracles import wilcoxon_enumerate


def test_dice_self_and_disjoint():
    seg = np.random.default_rng(0).integers(0, 4, (10, 10))
    assert hard_dice(seg, seg, range(1, 4)) == {1: 1.0, 2: 1.0, 3: 1.0}
    a = np.zeros((4, 4), int)
    b = np.zeros((4, 4), int)
    a[:2] = 1
    b[2:] = 1
    assert hard_dice(a, b, [1]) == {1: 0.0}


def test_dice_strip_overlap():
    a = np.zeros((6, 6), int)
    b = np.zeros((6, 6), int)
    a[0:3, 0:3] = 1
    b[0:3, 2:5] = 1
    assert hard_dice(a, b, [1])[1] == 2 * 3 / (9 + 9)


def test_dice_excludes_absent_labels_and_rejects_empty_set():
    a = np.ones((3, 3), int)
    assert hard_dice(a, a, [1, 7]) == {1: 1.0}
    assert np.isnan(mean_dice({}))
    with pytest.raises(ValueError):
        hard_dice(a, a, [])


def test_dice_matches_counting_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.integers(0, 3, (9, 9)), rng.integers(0, 3, (9, 9))
        got = hard_dice(a, b, [1, 2])
        for lab in (1, 2):
            inter = sum(1 for i in range(9) for j in range(9) if a[i, j] == lab == b[i, j])
            size = sum(1 for v in a.ravel() if v == lab) + sum(1 for v in b.ravel() if v == lab)
            assert got[lab] == 2 * inter / size


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dice_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 4, (7, 7)), rng.integers(0, 4, (7, 7))
    assert hard_dice(a, b, range(1, 4)) == hard_dice(b, a, range(1, 4))


def test_tre_identity_and_translation():
    pts = np.array([[1.0, 2.0], [4.5, 3.25], [6.0, 0.0]])
    fixed = LandmarkSet(pts)
    assert tre(fixed, LandmarkSet(pts), np.zeros((2, 8, 8))) == (0.0, 0.0)
    d = np.zeros((2, 8, 8))
    d[0], d[1] = 1.0, -0.5
    assert tre(fixed, LandmarkSet(pts + [1.0, -0.5]), d) == (0.0, 0.0)


def test_tre_scales_with_spacing():
    rng = np.random.default_rng(2)
    fp, mp = rng.uniform(0, 7, (5, 2)), rng.uniform(0, 7, (5, 2))
    d = rng.uniform(-1, 1, (2, 8, 8))
    m1, s1 = tre(LandmarkSet(fp, 1.0), LandmarkSet(mp), d)
    m2, s2 = tre(LandmarkSet(fp, 2.0), LandmarkSet(mp), d)
    assert m2 == pytest.approx(2 * m1, rel=1e-15) and s2 == pytest.approx(2 * s1, rel=1e-15)


def test_tre_count_mismatch():
    with pytest.raises(ShapeError):
        tre(LandmarkSet(np.zeros((2, 2))), LandmarkSet(np.zeros((3, 2))), np.zeros((2, 4, 4)))


def test_tre_invariant_to_consistent_relabeling():
    rng = np.random.default_rng(3)
    fp, mp = rng.uniform(0, 7, (6, 2)), rng.uniform(0, 7, (6, 2))
    d = rng.uniform(-1, 1, (2, 8, 8))
    perm = rng.permutation(6)
    a = tre(LandmarkSet(fp), LandmarkSet(mp), d)
    b = tre(LandmarkSet(fp[perm]), LandmarkSet(mp[perm]), d)
    assert a == pytest.approx(b, rel=1e-14)


def test_landmark_spacing_must_be_positive():
    with pytest.raises(ValueError):
        LandmarkSet(np.zeros((1, 2)), spacing=0.0)


def test_ndv_translation_and_reflection():
    d = np.zeros((2, 6, 7))
    d[0], d[1] = 2.3, -1.1
    assert ndv(d) == 0.0
    xx = np.tile(np.arange(7.0), (6, 1))
    refl = np.stack([np.zeros((6, 7)), (6 - xx) - xx])
    assert ndv(refl) == 100.0


def test_ndv_single_cell_fold():
    # one 2 x 2 cell; the bottom row's x-targets are swapped, so corners map to
    # c00 (0,0), c01 (1,0), c10 (1,1), c11 (0,1) as (x, y)
    d = np.zeros((2, 2, 2))
    d[1, 1, 0], d[1, 1, 1] = 1.0, -1.0
    # signed areas: (c00,c01,c11) +0.5, (c00,c11,c10) -0.5, (c00,c01,c10) +0.5,
    # (c01,c11,c10) -0.5; two flipped triangles at weight 1/2 each
    assert ndv(d) == pytest.approx(100.0 * 0.5 * (0.5 + 0.5), abs=1e-12)


def test_ndv_capped_per_cell():
    # a fold that also expands the cell still counts at most the cell itself
    d = np.zeros((2, 2, 2))
    d[1, 1, 0], d[1, 1, 1] = 5.0, -5.0
    assert ndv(d) == 100.0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.3, 3), st.floats(-1, 1), st.floats(-1, 1), st.floats(0.3, 3),
       st.floats(-5, 5), st.floats(-5, 5))
def test_ndv_zero_for_orientation_preserving_affine(a, b, c, e, ty, tx):
    if a * e - b * c <= 1e-3:
        return
    yy, xx = np.mgrid[0:6, 0:6].astype(float)
    # map (y, x) -> (a y + b x + ty, c y + e x + tx) with det [[e, c], [b, a]] > 0 in (x, y)
    d = np.stack([a * yy + b * xx + ty - yy, c * yy + e * xx + tx - xx])
    assert ndv(d) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ndv_non_negative_and_bounded(seed):
    d = np.random.default_rng(seed).uniform(-3, 3, (2, 6, 6))
    assert 0.0 <= ndv(d) <= 100.0


def test_wilcoxon_all_positive_n5():
    w, p = wilcoxon_signed_rank([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
    assert w == 15 and p == 0.0625


def test_wilcoxon_constant_shift_n10():
    y = np.arange(10.0)
    w, p = wilcoxon_signed_rank(y + 0.5, y)
    assert w == 55 and p == 2 / 1024


def test_wilcoxon_symmetric_differences():
    d = np.array([1.0, -1.0, 2.0, -2.0, 3.0, -3.0])
    assert wilcoxon_signed_rank(d, np.zeros(6))[1] == 1.0


def test_wilcoxon_errors():
    with pytest.raises(ValueError):
        wilcoxon_signed_rank(np.ones(6), np.ones(6))
    with pytest.raises(ValueError):
        wilcoxon_signed_rank(np.ones(4), np.zeros(4))


def test_wilcoxon_matches_enumeration():
    rng = np.random.default_rng(4)
    for _ in range(60):
        n = int(rng.integers(5, 13))
        # rounded values create ties and zero differences
        x = np.round(rng.normal(0, 1, n), 1)
        y = np.round(rng.normal(0.3, 1, n), 1)
        if np.all(x == y):
            continue
        w, p = wilcoxon_signed_rank(x, y)
        w_ref, p_ref = wilcoxon_enumerate(x, y)
        assert w == w_ref
        assert p == pytest.approx(p_ref, rel=1e-12)


def test_wilcoxon_large_n_normal_approximation():
    from math import erfc, sqrt
    x = np.arange(1.0, 31.0)
    w, p = wilcoxon_signed_rank(x, np.zeros(30))
    mu, var = 30 * 31 / 4, 30 * 31 * 61 / 24
    assert w == 465
    assert p == pytest.approx(erfc((465 - mu - 0.5) / sqrt(var) / sqrt(2)), rel=1e-12)


def test_metric_report_row_order():
    r = MetricReport("007", {1: 0.5}, 0.5, 1.25, 0.5, 0.0)
    row = r.row("ours", 2, "bias3")
    assert tuple(row) == REPORT_COLUMNS
    assert row["tre_mean"] == "1.25" and row["seed"] == "2"
