"""
Signal preprocessing: Butterworth band-pass, zero-phase filtering,
polyphase resampling and per-segment z-scoring.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal

from .errors import DegenerateSegmentWarning, SignalLengthError

TARGET_FS = 100.0
BAND_HZ = (0.3, 30.0)
FILTER_ORDER = 10
COHORTS = ("younger", "older")


@dataclass(frozen=True)
class BiquadCascade:
    sos: np.ndarray  # [n_sections, 6] rows of (b0, b1, b2, 1, a1, a2)
    order: int
    passband_hz: tuple[float, float]
    sample_rate_hz: float

    @property
    def sections(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(row[:3], row[3:]) for row in self.sos]

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots(row[3:]) for row in self.sos])


@dataclass(frozen=True)
class RawSegment:
    samples: np.ndarray
    sample_rate_hz: float
    subject_id: str
    cohort: str
    segment_id: str

    def __post_init__(self):
        x = np.asarray(self.samples)
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")
        if x.size == 0 or not np.all(np.isfinite(x)):
            raise ValueError(f"segment {self.segment_id}: samples must be non-empty and finite")


@dataclass(frozen=True)
class Segment:
    """A preprocessed, z-scored trace at the target rate."""

    samples: np.ndarray
    subject_id: str
    cohort: str
    segment_id: str
    fs: float = TARGET_FS

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.fs


def design_bandpass(order: int, low_hz: float, high_hz: float, fs: float) -> BiquadCascade:
    """Butterworth band-pass of total ``order`` as ``order // 2`` biquads."""
    if order < 2 or order % 2:
        raise ValueError(f"band-pass order must be even and >= 2, got {order}")
    if not 0 < low_hz < high_hz < fs / 2:
        raise ValueError(f"need 0 < low ({low_hz}) < high ({high_hz}) < fs/2 ({fs / 2})")
    sos = signal.butter(order // 2, [low_hz, high_hz], btype="bandpass", output="sos", fs=fs)
    return BiquadCascade(sos, order, (float(low_hz), float(high_hz)), float(fs))


def filtfilt(filt: BiquadCascade, x) -> np.ndarray:
    """Forward-backward filtering with odd reflection padding of 6 * order samples."""
    x = np.asarray(x, dtype=np.float64)
    padlen = 3 * (2 * filt.order)
    if x.shape[-1] <= padlen:
        raise SignalLengthError(
            f"need more than {padlen} samples for edge padding, got {x.shape[-1]}")
    return signal.sosfiltfilt(filt.sos, x, padtype="odd", padlen=padlen)


def _rational(fs_in: float, fs_out: float) -> tuple[int, int]:
    ratio = Fraction(fs_out / fs_in).limit_denominator(10_000)
    return ratio.numerator, ratio.denominator


def resample_kernel(up: int, down: int, taps_per_phase: int = 64) -> np.ndarray:
    """Kaiser-windowed sinc low-pass at the lower Nyquist rate.

    Each polyphase branch is normalised to unit DC gain.
    """
    half = taps_per_phase // 2 * up
    h = signal.firwin(2 * half + 1, 1.0 / max(up, down), window=("kaiser", 8.0))
    h = np.concatenate([h, np.zeros((-len(h)) % up)])
    for phase in range(up):
        h[phase::up] /= h[phase::up].sum()
    return h


def resample_to(x, fs_in: float, fs_out: float, taps_per_phase: int = 64) -> np.ndarray:
    """Polyphase rational downsampling; output has round(n * fs_out / fs_in) samples."""
    x = np.asarray(x, dtype=np.float64)
    if fs_out <= 0:
        raise ValueError("target rate must be positive")
    if fs_out > fs_in:
        raise NotImplementedError("upsampling is not supported")
    if fs_out == fs_in:
        return x.copy()
    up, down = _rational(fs_in, fs_out)
    n = x.shape[-1]
    n_out = int(round(n * fs_out / fs_in))
    h = resample_kernel(up, down, taps_per_phase)
    delay = taps_per_phase // 2 * up
    # Pad at least half a kernel of input samples on each side, choosing the
    # amount so the first wanted output lands on the decimation grid.
    npad = taps_per_phase
    while (delay + npad * up) % down:
        npad += 1
    mode = {"mode": "reflect", "reflect_type": "odd"} if n > 1 else {"mode": "edge"}
    xx = np.pad(x, npad, **mode)
    y = signal.upfirdn(h, xx, up, down)
    start = (delay + npad * up) // down
    return y[start:start + n_out]


def zscore(x) -> np.ndarray:
    """Zero mean, unit population variance. Constant input maps to zeros with a warning."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        raise ValueError("z-scoring needs at least 2 samples")
    sd = x.std()
    if sd < 1e-12:
        warnings.warn("constant segment mapped to zeros", DegenerateSegmentWarning, stacklevel=2)
        return np.zeros_like(x)
    return (x - x.mean()) / sd


def preprocess(raw: RawSegment, fs_out: float = TARGET_FS, band=BAND_HZ,
               order: int = FILTER_ORDER) -> Segment:
    """Band-pass at the native rate, resample to ``fs_out``, z-score."""
    filt = design_bandpass(order, band[0], band[1], raw.sample_rate_hz)
    y = filtfilt(filt, raw.samples)
    y = resample_to(y, raw.sample_rate_hz, fs_out)
    return Segment(zscore(y), raw.subject_id, raw.cohort, raw.segment_id, fs_out)
