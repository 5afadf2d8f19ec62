"""
By-event and by-subject evaluation of spindle detections.

Events are matched one-to-one on intersection-over-union. Counts are pooled
over segments before precision, recall and F1 are formed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy import stats

from .errors import DegenerateInputError
from .postproc import SpindleEvent

THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(1, 21))
COHORTS = ("younger", "older")


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    threshold: float
    pairs: list[tuple[int, int, float]] = field(default_factory=list)


@dataclass
class SubjectStats:
    subject_id: str
    cohort: str
    n_events: int
    total_minutes: float
    density_per_min: float
    mean_duration_s: float | None  # None when the subject has no events


def overlap(a: SpindleEvent, b: SpindleEvent) -> float:
    """Intersection over union of two events."""
    inter = min(a.offset_s, b.offset_s) - max(a.onset_s, b.onset_s)
    if inter <= 0:
        return 0.0
    # the span equals the union when the events intersect; it keeps iou <= 1 under rounding
    return inter / (max(a.offset_s, b.offset_s) - min(a.onset_s, b.onset_s))


def overlap_matrix(reference: Sequence[SpindleEvent], detected: Sequence[SpindleEvent]) -> np.ndarray:
    if not reference or not detected:
        return np.zeros((len(reference), len(detected)))
    rs = np.array([e.onset_s for e in reference])[:, None]
    rd = np.array([e.duration_s for e in reference])[:, None]
    ds = np.array([e.onset_s for e in detected])[None, :]
    dd = np.array([e.duration_s for e in detected])[None, :]
    re, de = rs + rd, ds + dd
    inter = np.minimum(re, de) - np.maximum(rs, ds)
    span = np.maximum(re, de) - np.minimum(rs, ds)
    return np.where(inter > 0, inter / span, 0.0)


def _check_disjoint(events: Sequence[SpindleEvent], name: str) -> None:
    for prev, cur in zip(events, events[1:]):
        if cur.onset_s < prev.offset_s - 1e-9:
            raise ValueError(f"{name} events must be sorted and non-overlapping "
                             f"({prev} then {cur})")


def _hits(iou: np.ndarray, threshold: float) -> np.ndarray:
    # exact coincidence counts at every threshold, including 1.0
    return (iou > threshold) | (iou >= 1.0)


def match_events(reference: Sequence[SpindleEvent], detected: Sequence[SpindleEvent],
                 threshold: float, iou: np.ndarray | None = None) -> MatchResult:
    """One-to-one matching that maximises the number of true positives.

    Among maximum matchings the one with the largest summed overlap is kept.
    """
    _check_disjoint(reference, "reference")
    _check_disjoint(detected, "detected")
    if iou is None:
        iou = overlap_matrix(reference, detected)
    pairs = []
    hits = _hits(iou, threshold)
    rows = np.flatnonzero(hits.any(axis=1))
    cols = np.flatnonzero(hits.any(axis=0))
    if len(rows):
        sub = iou[np.ix_(rows, cols)]
        ok = hits[np.ix_(rows, cols)]
        # count dominates: total overlap bonus is < 1 for any matching
        weight = np.where(ok, 1.0 + sub / (min(len(rows), len(cols)) + 1), 0.0)
        r_idx, c_idx = linear_sum_assignment(weight, maximize=True)
        for r, c in zip(r_idx, c_idx):
            if ok[r, c]:
                pairs.append((int(rows[r]), int(cols[c]), float(sub[r, c])))
    pairs.sort()
    tp = len(pairs)
    return MatchResult(tp, len(detected) - tp, len(reference) - tp, threshold, pairs)


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall and F1 = 2TP / (2TP + FP + FN) with empty-set conventions."""
    precision = tp / (tp + fp) if tp + fp else (1.0 if fn == 0 else 0.0)
    recall = tp / (tp + fn) if tp + fn else (1.0 if fp == 0 else 0.0)
    denom = 2 * tp + fp + fn
    f1 = 2 * tp / denom if denom else 1.0
    return precision, recall, f1


def prf_of(m: MatchResult) -> tuple[float, float, float]:
    return prf(m.tp, m.fp, m.fn)


@dataclass
class CurvePoint:
    threshold: float
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return prf(self.tp, self.fp, self.fn)[0]

    @property
    def recall(self) -> float:
        return prf(self.tp, self.fp, self.fn)[1]

    @property
    def f1(self) -> float:
        return prf(self.tp, self.fp, self.fn)[2]


def f1_bar(thresholds: Sequence[float], f1s: Sequence[float]) -> float:
    """Trapezoidal integral of F1 over [0, 1]; F1 near 0 is taken from the first grid value."""
    t = np.concatenate([[0.0], thresholds])
    f = np.concatenate([[f1s[0]], f1s])
    if t[-1] < 1.0:
        t = np.append(t, 1.0)
        f = np.append(f, f1s[-1])
    return float(np.sum((t[1:] - t[:-1]) * (f[1:] + f[:-1]) / 2))


def pooled_curve(pairs: Iterable[tuple[Sequence[SpindleEvent], Sequence[SpindleEvent]]],
                 grid: Sequence[float] = THRESHOLD_GRID) -> list[CurvePoint]:
    """Counts summed over (reference, detected) segment pairs at each threshold."""
    totals = np.zeros((len(grid), 3), dtype=np.int64)
    for reference, detected in pairs:
        iou = overlap_matrix(reference, detected)
        for i, theta in enumerate(grid):
            m = match_events(reference, detected, theta, iou)
            totals[i] += (m.tp, m.fp, m.fn)
    return [CurvePoint(float(th), *map(int, row)) for th, row in zip(grid, totals)]


def f1_curve_and_bar(reference: Sequence[SpindleEvent], detected: Sequence[SpindleEvent],
                     grid: Sequence[float] = THRESHOLD_GRID):
    """F1 at every grid threshold and its integral over thresholds."""
    curve = pooled_curve([(reference, detected)], grid)
    f1s = [p.f1 for p in curve]
    return f1s, f1_bar(grid, f1s)


# ---------------------------------------------------------------- by subject

def subject_stats(events_by_segment: dict[str, Sequence[SpindleEvent]],
                  segment_durations: dict[str, float],
                  segment_subject: dict[str, str],
                  subject_cohort: dict[str, str] | None = None) -> list[SubjectStats]:
    """Spindle density (events per minute) and mean duration for every subject."""
    subject_cohort = subject_cohort or {}
    minutes: dict[str, float] = {}
    durations: dict[str, list[float]] = {}
    for seg, subj in segment_subject.items():
        dur = segment_durations[seg]
        if dur <= 0:
            raise ValueError(f"segment {seg} has non-positive duration")
        minutes[subj] = minutes.get(subj, 0.0) + dur / 60.0
        durations.setdefault(subj, []).extend(e.duration_s for e in events_by_segment.get(seg, ()))
    out = []
    for subj in sorted(minutes):
        if minutes[subj] <= 0:
            raise ValueError(f"subject {subj} has zero scored minutes")
        d = durations[subj]
        out.append(SubjectStats(subj, subject_cohort.get(subj, ""), len(d), minutes[subj],
                                len(d) / minutes[subj], float(np.mean(d)) if d else None))
    return out


@dataclass
class Correlation:
    n: int
    r: float
    r2: float
    slope: float
    intercept: float
    p_value: float


def correlate(x, y) -> Correlation:
    """Pearson r and the OLS line y = slope * x + intercept (x is the reference)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d and of equal length")
    n = len(x)
    if n < 3:
        raise DegenerateInputError("need at least 3 subjects to correlate")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite values in correlation input")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy, sxy = dx @ dx, dy @ dy, dx @ dy
    if sxx <= 0 or syy <= 0:
        raise DegenerateInputError("zero variance in correlation input")
    r = float(np.clip(sxy / math.sqrt(sxx * syy), -1.0, 1.0))
    slope = float(sxy / sxx)
    intercept = float(y.mean() - slope * x.mean())
    if abs(r) < 1.0:
        t = r * math.sqrt((n - 2) / (1 - r * r))
        p = float(2 * stats.t.sf(abs(t), n - 2))
    else:
        p = 0.0
    return Correlation(n, r, r * r, slope, intercept, p)


def normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2))


def compare_correlations(r1: float, n1: int, r2: float, n2: int) -> tuple[float, float]:
    """Two-sided test of r1 == r2 for independent samples via Fisher's z."""
    if abs(r1) >= 1 or abs(r2) >= 1:
        raise ValueError("Fisher transform is infinite for |r| = 1")
    if n1 < 4 or n2 < 4:
        raise ValueError("need at least 4 observations per correlation")
    z = (math.atanh(r1) - math.atanh(r2)) / math.sqrt(1 / (n1 - 3) + 1 / (n2 - 3))
    return z, min(1.0, 2 * normal_sf(abs(z)))
