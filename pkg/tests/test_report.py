import numpy as np
import pytest

from srgd.report import box_plot_svg, box_stats, compare, per_pair, summarize


def _rows(values, setting, ev="std", seed=0, metric="mean_dsc"):
    out = []
    for i, v in enumerate(values):
        r = {"setting": setting, "seed": str(seed), "eval": ev, "pair": f"{i:03d}",
             "mean_dsc": "0.5", "tre_mean": "1.0", "tre_std": "0.1", "ndv_percent": "0.0"}
        r[metric] = repr(float(v))
        out.append(r)
    return out


def test_identical_settings_are_not_significant():
    v = np.linspace(0.5, 0.9, 16)
    marks = compare(_rows(v, "ours") + _rows(v, "base"), "mean_dsc")
    assert len(marks) == 1 and marks[0].mark == "n.s." and marks[0].note


def test_consistent_improvement_is_significant():
    v = np.linspace(0.5, 0.9, 16)
    (m,) = compare(_rows(v + 0.01, "ours") + _rows(v, "base"), "mean_dsc")
    assert m.mark == "*" and m.p == 2 / 2 ** 16 and m.w == 136


def test_missing_reference_gives_no_marks():
    assert compare(_rows([1, 2, 3, 4, 5], "a") + _rows([2, 3, 4, 5, 6], "b"), "mean_dsc") == []


def test_per_pair_averages_seeds():
    rows = _rows([1.0, 2.0], "x", seed=0) + _rows([3.0, 5.0], "x", seed=1)
    assert per_pair(rows, "x", "std", "mean_dsc") == {"000": 2.0, "001": 3.5}


def test_summary_statistics():
    rng = np.random.default_rng(0)
    v = rng.random(10)
    s = summarize(_rows(v, "ours", ev="a") + _rows(v[::-1], "ours", ev="b"))
    assert [(r["setting"], r["eval"], r["n"]) for r in s] == [("ours", "a", "10"),
                                                              ("ours", "b", "10")]
    assert abs(float(s[0]["mean_dsc"]) - v.mean()) < 1e-12
    assert abs(float(s[0]["std_dsc"]) - v.std()) < 1e-12


def test_box_stats():
    st = box_stats([1, 2, 3, 4, 100])
    assert (st["q1"], st["median"], st["q3"]) == (2.0, 3.0, 4.0)
    assert st["hi"] == 4.0 and st["outliers"] == [100.0]
    with pytest.raises(ValueError):
        box_stats([])


def test_svg_is_deterministic_and_well_formed():
    import xml.etree.ElementTree as ET
    rows = _rows([0.7, 0.8, 0.75, 0.9, 0.85], "ours") + _rows([0.6, 0.7, 0.65, 0.8, 0.7], "b")
    marks = compare(rows, "mean_dsc")
    a = box_plot_svg(rows, "mean_dsc", "t", marks)
    assert a == box_plot_svg(rows, "mean_dsc", "t", marks)
    root = ET.fromstring(a)
    assert root.tag.endswith("svg")
    with pytest.raises(ValueError):
        box_plot_svg([], "mean_dsc")
