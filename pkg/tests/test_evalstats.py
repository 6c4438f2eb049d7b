import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import two_sided_p_by_quadrature, welch_by_hand
from iclstreams import evalstats
from iclstreams.tensor import ContractError


# ----------------------------------------------------------------- first_crossing


@pytest.mark.parametrize("series,theta,expected", [
    ([0.1, 0.96, 0.99], 0.95, 1),
    ([0.1, 0.2], 0.95, None),
    ([0.96, 0.96, 0.96], 0.95, 0),
    ([0.5, 0.95, 0.951], 0.95, 2),  # strict inequality
])
def test_first_crossing_examples(series, theta, expected):
    assert evalstats.first_crossing(series, theta) == expected


def test_first_crossing_empty():
    with pytest.raises(ContractError):
        evalstats.first_crossing([], 0.5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.floats(0.01, 0.98), st.floats(0.001, 0.5))
def test_first_crossing_monotone_in_theta(series, lo, gap):
    hi = min(lo + gap, 0.99)
    a = evalstats.first_crossing(series, lo)
    b = evalstats.first_crossing(series, hi)
    if b is not None:
        assert a is not None and a <= b


# ----------------------------------------------------------------- welch_t


def test_welch_identical_groups():
    assert evalstats.welch_t([1, 2, 3], [1, 2, 3]) == (0.0, 1.0)


def test_welch_zero_variance_equal_means():
    assert evalstats.welch_t([4, 4], [4, 4, 4]) == (0.0, 1.0)


def test_welch_separated_groups():
    t, p = evalstats.welch_t([1, 2, 3], [11, 12, 13])
    assert t < 0 and abs(t) > 10 and p < 0.01


def test_welch_needs_two():
    with pytest.raises(ContractError):
        evalstats.welch_t([1.0], [1.0, 2.0])


def test_welch_matches_quadrature_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        na, nb = rng.integers(2, 7, size=2)
        a = list(rng.normal(rng.uniform(-2, 2), rng.uniform(0.3, 3), na))
        b = list(rng.normal(rng.uniform(-2, 2), rng.uniform(0.3, 3), nb))
        t, p = evalstats.welch_t(a, b)
        t_ref, df = welch_by_hand(a, b)
        assert t == pytest.approx(t_ref, rel=1e-9)
        assert abs(p - two_sided_p_by_quadrature(t_ref, df)) < 1e-3


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=6),
       st.lists(st.floats(-100, 100), min_size=2, max_size=6))
def test_welch_antisymmetric(a, b):
    t1, p1 = evalstats.welch_t(a, b)
    t2, p2 = evalstats.welch_t(b, a)
    assert t1 == pytest.approx(-t2) or (math.isinf(t1) and t1 == -t2)
    assert p1 == pytest.approx(p2)


# ----------------------------------------------------------------- aggregate


def _report(variant, series_by_task, interval=500):
    return SimpleNamespace(variant=variant, snapshot_interval=interval, accuracy=series_by_task)


def _ramp(cross_at, n=20):
    return [0.0 if i < cross_at else 1.0 for i in range(n)]


def test_aggregate_identical_series_have_zero_std():
    r = _report("classic", {"ic": [_ramp(5)] * 4, "ic2": [_ramp(6)] * 4})
    rows, _ = evalstats.aggregate([r])
    row = evalstats.lookup(rows, "ic", "classic", 0.95)
    assert (row.mean, row.std, row.n) == (5.0, 0.0, 4)


def test_aggregate_population_std_and_ttest():
    slow = _report("classic", {"ic": [_ramp(c) for c in (10, 12, 14, 16)], "ic2": [_ramp(10)] * 4})
    fast = _report("values", {"ic": [_ramp(c) for c in (5, 6, 7, 8)], "ic2": [_ramp(5)] * 4})
    rows, tests = evalstats.aggregate([slow, fast])
    row = evalstats.lookup(rows, "ic", "classic", 0.5)
    assert row.mean == 13.0 and row.std == pytest.approx(np.std([10, 12, 14, 16]))
    (test,) = [t for t in tests if t.task == "ic" and t.theta == 0.95]
    t_ref, p_ref = evalstats.welch_t([10, 12, 14, 16], [5, 6, 7, 8])
    assert (test.variant_a, test.variant_b) == ("classic", "values")
    assert test.t == t_ref and test.p == p_ref


def test_aggregate_not_crossed():
    r = _report("keys", {"ic": [_ramp(5), [0.0] * 20], "ic2": [_ramp(5)] * 2})
    rows, _ = evalstats.aggregate([r])
    row = evalstats.lookup(rows, "ic", "keys", 0.9)
    assert row.mean is None and row.crossings == (5, None)


def test_aggregate_permutation_invariant():
    series = [_ramp(c) for c in (3, 9, 4, 7)]
    a = _report("v", {"ic": series, "ic2": series})
    b = _report("v", {"ic": series[::-1], "ic2": series[::-1]})
    ra, _ = evalstats.aggregate([a])
    rb, _ = evalstats.aggregate([b])
    assert [(r.mean, r.std) for r in ra] == [(r.mean, r.std) for r in rb]


def test_aggregate_cadence_mismatch():
    with pytest.raises(ContractError):
        evalstats.aggregate([_report("a", {"ic": [], "ic2": []}, 500), _report("b", {"ic": [], "ic2": []}, 250)])


def test_csv_headers(tmp_path):
    r = _report("classic", {"ic": [_ramp(2)] * 2, "ic2": [_ramp(3)] * 2})
    s = _report("values", {"ic": [_ramp(1)] * 2, "ic2": [_ramp(1)] * 2})
    rows, tests = evalstats.aggregate([r, s])
    evalstats.write_threshold_csv(rows, tmp_path / "th.csv")
    evalstats.write_ttest_csv(tests, tmp_path / "tt.csv")
    assert (tmp_path / "th.csv").read_text().splitlines()[0] == "task,variant,theta,mean,std,n"
    assert (tmp_path / "tt.csv").read_text().splitlines()[0] == "task,theta,variantA,variantB,t,p"
    assert len((tmp_path / "th.csv").read_text().splitlines()) == 1 + 2 * 2 * 3
