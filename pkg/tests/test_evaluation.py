import csv
import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ccgan_vc.corpus import N_MCC, FeatureBundle, SpeakerRegistry, write_features
from ccgan_vc.evaluation import (
    AVERAGE,
    GROUPS,
    _frame_costs,
    dtw_align,
    evaluate_pairs,
    mcd,
    msd,
    parse_converted_name,
    path_cost,
)

MCD_UNIT = 10 / math.log(10) * math.sqrt(2)


def brute_force_cost(costs: np.ndarray) -> float:
    ta, tb = costs.shape

    @lru_cache(maxsize=None)
    def best(i, j):
        if (i, j) == (0, 0):
            return costs[0, 0]
        prev = []
        if i > 0 and j > 0:
            prev.append(best(i - 1, j - 1))
        if i > 0:
            prev.append(best(i - 1, j))
        if j > 0:
            prev.append(best(i, j - 1))
        return costs[i, j] + min(prev)

    # cross-check the recursion against explicit enumeration on tiny grids
    return best(ta - 1, tb - 1)


def all_paths(ta, tb):
    def rec(i, j):
        if (i, j) == (ta - 1, tb - 1):
            yield [(i, j)]
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            ni, nj = i + di, j + dj
            if ni < ta and nj < tb:
                for rest in rec(ni, nj):
                    yield [(i, j)] + rest

    return list(rec(0, 0))


def assert_valid_path(path, ta, tb):
    assert path[0] == (0, 0) and path[-1] == (ta - 1, tb - 1)
    for (i, j), (k, l) in zip(path, path[1:]):
        assert (k - i, l - j) in ((1, 0), (0, 1), (1, 1))


# -- DTW ----------------------------------------------------------------


def test_dtw_identical_is_diagonal(rng):
    a = rng.normal(size=(9, 5))
    assert dtw_align(a, a) == [(i, i) for i in range(9)]
    const = np.ones((6, 5))
    assert dtw_align(const, const) == [(i, i) for i in range(6)]


def test_dtw_forced_shape():
    assert dtw_align(np.zeros((1, 3)), np.zeros((3, 3))) == [(0, 0), (0, 1), (0, 2)]
    assert dtw_align(np.zeros((3, 3)), np.zeros((1, 3))) == [(0, 0), (1, 0), (2, 0)]


def test_dtw_tie_break_vertical_before_horizontal():
    # everything costs zero: from (1, 2) the diagonal is unavailable at the end
    path = dtw_align(np.zeros((3, 3)), np.zeros((2, 3)))
    assert path == [(0, 0), (1, 0), (2, 1)]


def test_dtw_ignores_dimension_zero(rng):
    a = rng.normal(size=(5, 4))
    b = rng.normal(size=(7, 4))
    b2 = b.copy()
    b2[:, 0] += rng.normal(size=7) * 100
    assert dtw_align(a, b) == dtw_align(a, b2)


def test_dtw_brute_force_example(rng):
    a, b = rng.normal(size=(5, 2)), rng.normal(size=(6, 2))
    costs = _frame_costs(a, b)
    path = dtw_align(a, b)
    assert_valid_path(path, 5, 6)
    exhaustive = min(path_cost(costs, p) for p in all_paths(5, 6))
    assert abs(path_cost(costs, path) - exhaustive) < 1e-12
    assert abs(brute_force_cost(costs) - exhaustive) < 1e-12


def test_dtw_brute_force_random():
    r = np.random.default_rng(2024)
    for _ in range(200):
        ta, tb, d = int(r.integers(1, 7)), int(r.integers(1, 7)), int(r.integers(2, 5))
        a, b = r.normal(size=(ta, d)), r.normal(size=(tb, d))
        costs = _frame_costs(a, b)
        path = dtw_align(a, b)
        assert_valid_path(path, ta, tb)
        exhaustive = min(path_cost(costs, p) for p in all_paths(ta, tb))
        assert abs(path_cost(costs, path) - exhaustive) < 1e-12


@given(st.integers(1, 12), st.integers(0, 10_000))
def test_dtw_not_worse_than_diagonal(T, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(T, 4)), r.normal(size=(T, 4))
    costs = _frame_costs(a, b)
    assert path_cost(costs, dtw_align(a, b)) <= path_cost(costs, [(i, i) for i in range(T)]) + 1e-12


def test_dtw_empty():
    with pytest.raises(ValueError, match="empty"):
        dtw_align(np.zeros((0, 3)), np.zeros((2, 3)))


# -- MCD ----------------------------------------------------------------


def test_mcd_examples(rng):
    a = rng.normal(size=(20, N_MCC))
    assert mcd(a, a) == 0.0
    b = a.copy()
    b[:, 1] += 1.0
    assert abs(mcd(a, b) - MCD_UNIT) < 1e-9
    assert abs(MCD_UNIT - 6.1419) < 1e-4
    with pytest.raises(ValueError, match="empty"):
        mcd(np.zeros((0, N_MCC)), a)


@given(arrays(np.float64, (6, 5), elements=st.floats(-10, 10)), arrays(np.float64, (8, 5), elements=st.floats(-10, 10)),
       arrays(np.float64, 1, elements=st.floats(-100, 100)))
def test_mcd_properties(a, b, shift):
    assert mcd(a, a) == 0.0
    assert mcd(a, b) >= 0
    a2, b2 = a.copy(), b.copy()
    a2[:, 0] += shift[0]
    b2[:, 0] += shift[0]
    assert mcd(a2, b2) == mcd(a, b)
    b3 = b.copy()
    b3[:, 0] = 123.0
    assert mcd(a, b3) == mcd(a, b)


# -- MSD ----------------------------------------------------------------


def test_msd_examples(rng):
    a = rng.normal(size=(200, N_MCC))
    assert msd(a, a) == 0.0
    assert abs(msd(a * math.e, a, align=False) - 2.0) < 1e-6
    with pytest.raises(ValueError, match="too short"):
        msd(np.zeros((32, N_MCC)), np.zeros((32, N_MCC)), segment=64)


@settings(max_examples=20)
@given(st.integers(0, 4), st.integers(0, 10_000), st.booleans())
def test_msd_reversal_invariance(m, seed, align):
    r = np.random.default_rng(seed)
    T = 64 + 32 * m
    a, b = r.normal(size=(T, 6)), r.normal(size=(T, 6))
    assert abs(msd(a, b, align=align) - msd(a[::-1], b[::-1], align=align)) < 1e-9


def test_msd_aligns_timing(rng):
    # a time-stretched copy is far closer after DTW resampling than without it
    t = np.arange(256)
    ref = np.stack([np.sin(2 * np.pi * t / (20 + k)) for k in range(8)], axis=1)
    idx = np.clip(np.round(np.arange(300) * 255 / 299).astype(int), 0, 255)
    stretched = ref[idx]
    assert msd(stretched, ref) < msd(stretched[:256], ref, align=False)


# -- reports ------------------------------------------------------------


REG = SpeakerRegistry(("F1", "F2", "M1", "M2"), ("F", "F", "M", "M"))


def _bundle(seed, T=80):
    r = np.random.default_rng(seed)
    return FeatureBundle(r.normal(size=(T, N_MCC)), np.full(T, 5.0), np.zeros((T, 1)))


def _write_dirs(tmp_path, names, same=True):
    conv, ref = tmp_path / "conv", tmp_path / "ref"
    conv.mkdir()
    ref.mkdir()
    for k, name in enumerate(names):
        write_features(conv / f"{name}.ccvc", _bundle(k))
        write_features(ref / f"{name}.ccvc", _bundle(k if same else 1000 + k))
    return conv, ref


def test_report_identical_dirs(tmp_path):
    names = ["F1__F2__u1", "M1__F1__u1", "F2__M2__u2", "M2__M1__u3", "F1__M1__u4"]
    conv, ref = _write_dirs(tmp_path, names)
    rep = evaluate_pairs(conv, ref, REG)
    assert set(rep.groups) == set(GROUPS) | {AVERAGE}
    for g in rep.groups.values():
        assert g.mcd_mean == 0 and g.msd_mean == 0 and g.mcd_std == 0
    assert rep.groups["F to M"].count == 2 and rep.groups[AVERAGE].count == 5
    rows = [line.split()[0:3] for line in rep.format_table().splitlines()[1:]]
    assert [" ".join(r[:3]) if r[0] != AVERAGE else r[0] for r in rows] == list(GROUPS) + [AVERAGE]


def test_report_csv(tmp_path):
    conv, ref = _write_dirs(tmp_path, ["F1__M1__a", "F1__M1__b", "M1__M2__c"], same=False)
    rep = evaluate_pairs(conv, ref, REG)
    out = tmp_path / "r.csv"
    rep.write_csv(out)
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["group", "metric", "mean", "std", "count"]
    fm = [r for r in rows if r[0] == "F to M"]
    assert [r[1] for r in fm] == ["MCD", "MSD"] and fm[0][4] == "2"
    vals = [f.mcd for f in rep.files if f.name.startswith("F1__M1")]
    assert float(fm[0][2]) == pytest.approx(np.mean(vals))
    assert float(fm[0][3]) == pytest.approx(np.std(vals))
    assert "F to F" in rep.format_table() and "n/a" in rep.format_table()
    assert not [r for r in rows if r[0] == "F to F"]


def test_report_reference_fallback(tmp_path):
    conv, ref = tmp_path / "conv", tmp_path / "ref"
    conv.mkdir()
    ref.mkdir()
    write_features(conv / "F1__M1__u7.ccvc", _bundle(1))
    write_features(ref / "M1__u7.ccvc", _bundle(1))
    rep = evaluate_pairs(conv, ref, REG)
    assert rep.groups[AVERAGE].mcd_mean == 0


def test_report_unmatched(tmp_path):
    conv, ref = _write_dirs(tmp_path, ["F1__M1__a"])
    write_features(conv / "F2__M2__orphan.ccvc", _bundle(3))
    with pytest.raises(FileNotFoundError, match="F2__M2__orphan"):
        evaluate_pairs(conv, ref, REG)


def test_report_bad_names(tmp_path):
    conv, ref = _write_dirs(tmp_path, ["justone"])
    with pytest.raises(ValueError, match="SRC__TGT__UTT"):
        evaluate_pairs(conv, ref, REG)
    with pytest.raises(ValueError):
        parse_converted_name("a__b")


def test_report_unknown_speaker(tmp_path):
    conv, ref = _write_dirs(tmp_path, ["Q1__M1__a"])
    with pytest.raises(KeyError, match="Q1"):
        evaluate_pairs(conv, ref, REG)


def test_report_empty_dir(tmp_path):
    (tmp_path / "c").mkdir()
    with pytest.raises(FileNotFoundError):
        evaluate_pairs(tmp_path / "c", tmp_path, REG)
