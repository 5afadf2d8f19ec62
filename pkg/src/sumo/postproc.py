"""From per-sample probabilities to spindle events."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import SPINDLE

TIE_TOL = 1e-9


@dataclass(frozen=True, order=True)
class SpindleEvent:
    onset_s: float
    duration_s: float

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError(f"event duration must be positive, got {self.duration_s}")
        if self.onset_s < 0:
            raise ValueError(f"event onset must be >= 0, got {self.onset_s}")

    @property
    def offset_s(self) -> float:
        return self.onset_s + self.duration_s


def moving_average(p, width: int) -> np.ndarray:
    """Centered moving average; edge windows average only the available samples.

    For even widths the window covers ``width // 2`` samples before and
    ``width // 2 - 1`` after the centre.
    """
    if width < 1:
        raise ValueError("smoothing width must be >= 1")
    p = np.asarray(p, dtype=np.float64)
    n = p.shape[-1]
    if width == 1 or n == 0:
        return p.copy()
    before, after = width // 2, (width - 1) // 2
    csum = np.concatenate([np.zeros(p.shape[:-1] + (1,)), np.cumsum(p, axis=-1)], axis=-1)
    idx = np.arange(n)
    lo = np.maximum(idx - before, 0)
    hi = np.minimum(idx + after + 1, n)
    return (csum[..., hi] - csum[..., lo]) / (hi - lo)


def runs(indicator) -> list[tuple[int, int]]:
    """(start, length) of each maximal run of truthy samples."""
    ind = np.asarray(indicator, dtype=np.int8)
    edges = np.diff(np.concatenate([[0], ind, [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    return [(int(a), int(b - a)) for a, b in zip(starts, stops)]


def events_from_indicator(indicator, fs: float, min_duration_s: float = 0.0) -> list[SpindleEvent]:
    return [SpindleEvent(start / fs, length / fs) for start, length in runs(indicator)
            if length / fs >= min_duration_s]


def extract_events(probs, width: int, fs: float, min_duration_s: float = 0.0) -> list[SpindleEvent]:
    """Smooth both class channels, take the point-wise maximum and join runs.

    ``probs`` is [2, T] with the spindle channel first. A sample is marked only
    if its smoothed spindle probability is strictly larger; differences within
    ``TIE_TOL`` count as ties so cumulative-sum rounding cannot break them.
    """
    probs = np.asarray(probs)
    smoothed = moving_average(probs, width)
    other = 1 - SPINDLE
    indicator = smoothed[SPINDLE] - smoothed[other] > TIE_TOL
    return events_from_indicator(indicator, fs, min_duration_s)
