import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from statsmodels.duration.survfunc import SurvfuncRight, survdiff

from must.metrics import (UndefinedMetricError, c_index, c_index_bruteforce, chi2_1df_sf,
                          kaplan_meier, log_rank, stratified_log_rank, stratify_median)


def survival_data(min_size=2, max_size=60):
    """Times from a small integer grid so ties are frequent; mixed censoring."""
    return st.integers(min_size, max_size).flatmap(lambda n: st.tuples(
        st.lists(st.integers(0, 5).map(float), min_size=n, max_size=n),
        st.lists(st.integers(1, 12).map(float), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n)))


# --- concordance -----------------------------------------------------------

def test_c_index_matches_bruteforce_on_100_instances():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 100:
        n = int(rng.integers(2, 201))
        risks = rng.integers(0, 8, n).astype(float)
        times = rng.integers(1, 15, n).astype(float)
        events = rng.integers(0, 2, n)
        try:
            want = c_index_bruteforce(risks, times, events)
        except UndefinedMetricError:
            with pytest.raises(UndefinedMetricError):
                c_index(risks, times, events)
            continue
        assert c_index(risks, times, events) == want
        checked += 1


@given(survival_data())
def test_c_index_equals_bruteforce_property(data):
    risks, times, events = data
    try:
        want = c_index_bruteforce(risks, times, events)
    except UndefinedMetricError:
        return
    assert c_index(risks, times, events) == want


def test_c_index_perfect_and_tied():
    t = np.arange(1.0, 11.0)
    e = np.ones(10)
    assert c_index(-t, t, e) == 1.0
    assert c_index(t, t, e) == 0.0
    assert c_index(np.zeros(10), t, e) == 0.5


def test_c_index_no_comparable_pairs():
    with pytest.raises(UndefinedMetricError):
        c_index([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [0, 0, 0])


def test_c_index_length_mismatch():
    with pytest.raises(ValueError):
        c_index([1.0, 2.0], [1.0, 2.0, 3.0], [1, 1, 1])


@given(survival_data(), st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
def test_c_index_invariant_to_monotone_risk_transform(data, a, b):
    risks, times, events = data
    risks = np.array(risks)
    try:
        base = c_index(risks, times, events)
    except UndefinedMetricError:
        return
    assert c_index(a * risks + b, times, events) == pytest.approx(base, abs=1e-12)
    assert c_index(-risks, times, events) == pytest.approx(1.0 - base, abs=1e-12)


# --- Kaplan-Meier ----------------------------------------------------------

def test_km_three_events():
    km = kaplan_meier([1, 2, 3], [1, 1, 1])
    np.testing.assert_allclose(km.survival, [2 / 3, 1 / 3, 0.0], atol=1e-15)
    assert km.step_at(0.5) == 1.0 and km.step_at(2.5) == pytest.approx(1 / 3)


def test_km_all_censored():
    km = kaplan_meier([1, 2, 3], [0, 0, 0])
    assert km.times.size == 0
    assert km.step_at(10.0) == 1.0


@given(survival_data(min_size=3))
def test_km_matches_statsmodels(data):
    _, times, events = data
    if not any(events):
        return
    km = kaplan_meier(times, events)
    ref = SurvfuncRight(np.array(times), np.array(events))
    np.testing.assert_allclose(km.times, ref.surv_times)
    np.testing.assert_allclose(km.survival, ref.surv_prob, atol=1e-12)
    assert np.all(np.diff(km.survival) <= 0)
    assert np.all(km.lower <= km.survival + 1e-12) and np.all(km.survival <= km.upper + 1e-12)


# --- log-rank --------------------------------------------------------------

def test_chi2_tail_at_critical_value():
    assert abs(chi2_1df_sf(3.841) - 0.05) <= 1e-3
    assert chi2_1df_sf(0.0) == 1.0


def test_identical_groups_statistic_zero():
    t = [1.0, 2.0, 3.0, 4.0, 5.0]
    e = [1, 0, 1, 1, 0]
    res = log_rank(t, e, t, e)
    assert res.statistic == 0.0 and res.p_value == 1.0


def test_log_rank_needs_events():
    with pytest.raises(UndefinedMetricError):
        log_rank([1.0, 2.0], [0, 0], [3.0], [0])
    with pytest.raises(UndefinedMetricError):
        log_rank([], [], [3.0], [1])


@given(survival_data(min_size=4))
def test_log_rank_matches_statsmodels(data):
    groups, times, events = data
    g = np.array(groups) % 2
    times, events = np.array(times), np.array(events)
    if g.min() == g.max() or not events.any():
        return
    ours = log_rank(times[g == 0], events[g == 0], times[g == 1], events[g == 1])
    stat, p = survdiff(times, events, g)
    if not math.isfinite(stat):
        return
    assert ours.statistic == pytest.approx(stat, rel=1e-9, abs=1e-12)
    assert ours.p_value == pytest.approx(p, rel=1e-9, abs=1e-12)


def test_strong_separation_is_significant():
    a = np.arange(1.0, 31.0)
    b = a + 30.0
    res = log_rank(a, np.ones(30), b, np.ones(30))
    assert res.p_value < 1e-6


# --- stratification --------------------------------------------------------

@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=50, unique=True)
       .filter(lambda x: len(x) % 2 == 0))
def test_distinct_even_split_is_equal_halves(risks):
    high, low = stratify_median(risks)
    assert len(high) == len(low) == len(risks) // 2
    assert min(np.array(risks)[high]) > max(np.array(risks)[low])


def test_all_equal_risks_leave_high_group_empty():
    high, low = stratify_median([1.0] * 6)
    assert high.size == 0 and low.size == 6
    with pytest.raises(UndefinedMetricError):
        stratified_log_rank([1.0] * 6, [1, 2, 3, 4, 5, 6], [1] * 6)
