"""Survival metrics: Harrell's C-index, Kaplan-Meier, two-group log-rank."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class UndefinedMetricError(ValueError):
    """Raised when a metric has no comparable pairs / no events to test."""


def _check_lengths(*arrays):
    n = len(arrays[0])
    if any(len(a) != n for a in arrays):
        raise ValueError("inputs must have equal lengths")
    return n


def c_index_pairs(risks, times, events) -> tuple[int, int]:
    """(2 * concordant weight, comparable count) in O(n log n).

    A pair (i, j) is comparable when ``t_i < t_j`` and ``delta_i = 1``; it is
    concordant when ``risk_i > risk_j`` and scores 1/2 on a risk tie. Counts
    are kept as integers (concordance doubled) so the ratio is exact.
    """
    risks = np.asarray(risks, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    n = _check_lengths(risks, times, events)

    # rank risks densely for the Fenwick tree
    uniq, rank = np.unique(risks, return_inverse=True)
    m = uniq.size
    tree = [0] * (m + 1)

    def add(i):
        i += 1
        while i <= m:
            tree[i] += 1
            i += i & -i

    def prefix(i):  # count of inserted ranks < i
        s = 0
        while i > 0:
            s += tree[i]
            i -= i & -i
        return s

    order = np.argsort(-times, kind="mergesort")
    conc2 = comparable = inserted = 0
    pos = 0
    while pos < n:
        # process a block of equal times: none of them are comparable with each other
        end = pos
        t = times[order[pos]]
        while end < n and times[order[end]] == t:
            end += 1
        block = order[pos:end]
        for i in block:
            if events[i]:
                r = int(rank[i])
                below = prefix(r)
                equal = prefix(r + 1) - below
                conc2 += 2 * below + equal
                comparable += inserted
        for i in block:
            add(int(rank[i]))
        inserted += len(block)
        pos = end
    return conc2, comparable


def c_index(risks, times, events) -> float:
    if len(risks) < 2:
        raise ValueError("need at least two subjects")
    conc2, comparable = c_index_pairs(risks, times, events)
    if comparable == 0:
        raise UndefinedMetricError("no comparable pairs")
    return conc2 / (2 * comparable)


def c_index_bruteforce(risks, times, events) -> float:
    """O(n^2) enumeration of the same pair rule; reference for tests."""
    n = _check_lengths(risks, times, events)
    conc2 = comparable = 0
    for i in range(n):
        if not events[i]:
            continue
        for j in range(n):
            if times[i] < times[j]:
                comparable += 1
                if risks[i] > risks[j]:
                    conc2 += 2
                elif risks[i] == risks[j]:
                    conc2 += 1
    if comparable == 0:
        raise UndefinedMetricError("no comparable pairs")
    return conc2 / (2 * comparable)


@dataclass
class KMCurve:
    times: np.ndarray       # distinct event times
    survival: np.ndarray    # S just after each time
    at_risk: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    censor_times: np.ndarray

    def step_at(self, t) -> float:
        idx = np.searchsorted(self.times, t, side="right") - 1
        return 1.0 if idx < 0 else float(self.survival[idx])


def kaplan_meier(times, events, z: float = 1.959963984540054) -> KMCurve:
    """Product-limit estimate with log-scale Greenwood 95% bands clipped to [0, 1]."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    _check_lengths(times, events)
    if times.size == 0:
        raise ValueError("need at least one subject")
    event_times = np.unique(times[events])
    surv, at_risk, lower, upper = [], [], [], []
    s, gw = 1.0, 0.0
    for t in event_times:
        n_t = int(np.sum(times >= t))
        d_t = int(np.sum((times == t) & events))
        s *= 1.0 - d_t / n_t
        if n_t > d_t:
            gw += d_t / (n_t * (n_t - d_t))
        else:
            gw = math.inf
        if s > 0.0 and math.isfinite(gw):
            half = z * math.sqrt(gw)
            lo, hi = s * math.exp(-half), s * math.exp(half)
        else:
            lo = hi = 0.0
        surv.append(s)
        at_risk.append(n_t)
        lower.append(min(max(lo, 0.0), 1.0))
        upper.append(min(max(hi, 0.0), 1.0))
    return KMCurve(event_times, np.array(surv), np.array(at_risk, dtype=np.int64),
                   np.array(lower), np.array(upper), np.sort(times[~events]))


@dataclass
class LogRankResult:
    statistic: float
    p_value: float
    observed: tuple[float, float]
    expected: tuple[float, float]
    variance: float


def chi2_1df_sf(stat: float) -> float:
    """Survival function of chi-square with one degree of freedom."""
    return math.erfc(math.sqrt(max(stat, 0.0) / 2.0))


def log_rank(times_a, events_a, times_b, events_b) -> LogRankResult:
    ta = np.asarray(times_a, dtype=np.float64)
    ea = np.asarray(events_a).astype(bool)
    tb = np.asarray(times_b, dtype=np.float64)
    eb = np.asarray(events_b).astype(bool)
    if ta.size == 0 or tb.size == 0:
        raise UndefinedMetricError("both groups must be nonempty")
    pooled = np.unique(np.concatenate([ta[ea], tb[eb]]))
    if pooled.size == 0:
        raise UndefinedMetricError("no events in either group")
    o_a = e_a = var = 0.0
    o_b = e_b = 0.0
    for t in pooled:
        n_a = np.sum(ta >= t)
        n_b = np.sum(tb >= t)
        d_a = np.sum((ta == t) & ea)
        d_b = np.sum((tb == t) & eb)
        n, d = n_a + n_b, d_a + d_b
        o_a += d_a
        o_b += d_b
        e_a += d * n_a / n
        e_b += d * n_b / n
        if n > 1:
            var += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1)
    stat = (o_a - e_a) ** 2 / var if var > 0 else 0.0
    return LogRankResult(float(stat), chi2_1df_sf(stat), (float(o_a), float(o_b)),
                         (float(e_a), float(e_b)), float(var))


def stratify_median(risks) -> tuple[np.ndarray, np.ndarray]:
    """(high, low) index arrays split at the median; ties at the median go low."""
    risks = np.asarray(risks, dtype=np.float64)
    med = np.median(risks)
    high = np.flatnonzero(risks > med)
    low = np.flatnonzero(risks <= med)
    return high, low


def stratified_log_rank(risks, times, events) -> LogRankResult:
    high, low = stratify_median(risks)
    times = np.asarray(times)
    events = np.asarray(events)
    return log_rank(times[high], events[high], times[low], events[low])
