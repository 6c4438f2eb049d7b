"""Threshold crossings, Welch t-tests and cross-seed aggregation."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .tensor import ContractError

THETAS = (0.5, 0.9, 0.95)
ICL_TASKS = ("ic", "ic2")


def first_crossing(series, theta: float) -> int | None:
    """Index of the first entry strictly above ``theta``; None if never crossed."""
    arr = np.asarray(series, dtype=float)
    if arr.size == 0:
        raise ContractError("first_crossing needs a non-empty series")
    if not 0.0 < theta < 1.0:
        raise ContractError(f"theta must lie in (0, 1), got {theta}")
    hits = np.flatnonzero(arr > theta)
    return int(hits[0]) if hits.size else None


def welch_t(a, b) -> tuple[float, float]:
    """Welch's unequal-variance t statistic and two-sided p-value."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ContractError("welch_t needs at least two observations per group")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        if diff == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    p = 2.0 * sps.t.sf(abs(t), df)
    return float(t), float(min(p, 1.0))


@dataclass(frozen=True)
class ThresholdRow:
    task: str
    variant: str
    theta: float
    mean: float | None  # None when some seed never crossed
    std: float | None
    n: int
    crossings: tuple


@dataclass(frozen=True)
class TTestRow:
    task: str
    theta: float
    variant_a: str
    variant_b: str
    t: float | None
    p: float | None


def aggregate(reports, tasks=ICL_TASKS, thetas=THETAS):
    """Per (task, variant, theta) crossing statistics plus pairwise Welch tests.

    ``reports`` is an iterable of RunReport-like objects exposing
    ``variant``, ``snapshot_interval`` and ``accuracy[task]`` (a list of
    per-seed series). Std is the population estimator.
    """
    reports = list(reports)
    if not reports:
        raise ContractError("aggregate needs at least one report")
    cadences = {r.snapshot_interval for r in reports}
    if len(cadences) != 1:
        raise ContractError(f"reports disagree on snapshot cadence: {sorted(cadences)}")
    by_variant: dict[str, list] = {}
    for r in reports:
        by_variant.setdefault(r.variant, []).append(r)

    crossings: dict[tuple, list] = {}
    rows = []
    for task in tasks:
        for variant, group in by_variant.items():
            series = [s for r in group for s in r.accuracy[task]]
            for theta in thetas:
                c = [first_crossing(s, theta) for s in series]
                crossings[(task, variant, theta)] = c
                done = all(x is not None for x in c)
                vals = np.asarray(c, dtype=float) if done else None
                rows.append(ThresholdRow(task, variant, theta,
                                         float(vals.mean()) if done else None,
                                         float(vals.std()) if done else None,
                                         len(c), tuple(c)))
    tests = []
    for task in tasks:
        for theta in thetas:
            for va, vb in itertools.combinations(by_variant, 2):
                ca, cb = crossings[(task, va, theta)], crossings[(task, vb, theta)]
                if None in ca or None in cb or len(ca) < 2 or len(cb) < 2:
                    tests.append(TTestRow(task, theta, va, vb, None, None))
                else:
                    t, p = welch_t(ca, cb)
                    tests.append(TTestRow(task, theta, va, vb, t, p))
    return rows, tests


def _fmt(v) -> str:
    return "nan" if v is None else repr(float(v))


def write_threshold_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "variant", "theta", "mean", "std", "n"])
        for r in rows:
            w.writerow([r.task, r.variant, r.theta, _fmt(r.mean), _fmt(r.std), r.n])


def write_ttest_csv(tests, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "theta", "variantA", "variantB", "t", "p"])
        for r in tests:
            w.writerow([r.task, r.theta, r.variant_a, r.variant_b, _fmt(r.t), _fmt(r.p)])


def lookup(rows, task, variant, theta) -> ThresholdRow:
    for r in rows:
        if r.task == task and r.variant == variant and r.theta == theta:
            return r
    raise KeyError((task, variant, theta))
