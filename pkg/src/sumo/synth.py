"""
Synthetic N2-like EEG: 1/f background plus waxing-waning sigma-band bursts
with exact ground-truth annotations.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .dsp import Segment, zscore
from .errors import ConfigError
from .postproc import SpindleEvent


@dataclass
class SynthConfig:
    fs: float = 100.0
    segment_s: float = 115.0
    pink_exponent: float = 1.0
    background_rms: float = 1.0
    rate_per_min: float = 4.0
    freq_hz: tuple[float, float] = (11.0, 16.0)
    duration_s: tuple[float, float] = (0.5, 2.0)
    snr: float = 6.0
    min_gap_s: float = 0.2
    # simulated rater / detector noise, see jitter_annotations
    onset_sd_s: float = 0.1
    miss_prob: float = 0.2
    false_rate_per_min: float = 1.0

    def validate(self) -> None:
        lo_f, hi_f = self.freq_hz
        lo_d, hi_d = self.duration_s
        if self.fs <= 0 or self.segment_s <= 0:
            raise ConfigError("fs and segment_s must be positive")
        if not 11.0 <= lo_f <= hi_f <= 16.0:
            raise ConfigError("spindle frequencies must lie in the 11-16 Hz sigma band")
        if hi_f >= self.fs / 2:
            raise ConfigError("spindle frequency above Nyquist")
        if not 0.5 <= lo_d <= hi_d:
            raise ConfigError("spindle durations must be >= 0.5 s")
        if self.rate_per_min < 0 or self.false_rate_per_min < 0:
            raise ConfigError("rates must be non-negative")
        if not 0.0 <= self.miss_prob <= 1.0:
            raise ConfigError("miss_prob must be in [0, 1]")
        if self.snr < 0 or self.background_rms <= 0 or self.onset_sd_s < 0 or self.min_gap_s < 0:
            raise ConfigError("snr, background_rms, onset_sd_s and min_gap_s must be non-negative")
        if self.rate_per_min > 0:
            mean_gap = 60.0 / self.rate_per_min
            if mean_gap <= (lo_d + hi_d) / 2 + self.min_gap_s:
                raise ConfigError(
                    f"rate {self.rate_per_min}/min leaves no room for {self.min_gap_s} s separation")
        if hi_d >= self.segment_s:
            raise ConfigError("spindles longer than the segment")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        """Accept flat keys or the nested background/spindle/jitter layout."""
        flat = {}
        nested = {
            "background": {"pink_exponent": "pink_exponent", "rms": "background_rms"},
            "spindle": {"rate_per_min": "rate_per_min", "freq_hz": "freq_hz",
                        "duration_s": "duration_s", "snr": "snr", "min_gap_s": "min_gap_s"},
            "jitter": {"onset_sd_s": "onset_sd_s", "miss_prob": "miss_prob",
                       "false_rate_per_min": "false_rate_per_min"},
        }
        for key, value in d.items():
            if key in nested:
                for sub, sub_value in value.items():
                    if sub not in nested[key]:
                        raise ConfigError(f"unknown key {key}.{sub}")
                    flat[nested[key][sub]] = sub_value
            elif key in cls.__dataclass_fields__:
                flat[key] = value
            elif key == "seed":
                continue
            else:
                raise ConfigError(f"unknown synth config key {key!r}")
        for key in ("freq_hz", "duration_s"):
            if key in flat:
                flat[key] = tuple(float(v) for v in flat[key])
        cfg = cls(**flat)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class SynthSegment:
    segment: Segment
    truth: list[SpindleEvent] = field(default_factory=list)


def gen_background(config: SynthConfig, n: int, seed) -> np.ndarray:
    """White noise shaped to a 1/f^exponent power spectrum, scaled to the configured RMS."""
    rng = np.random.default_rng(seed)
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n)
    gain = np.zeros_like(f)
    gain[1:] = f[1:] ** (-config.pink_exponent / 2)
    x = np.fft.irfft(spec * gain, n)
    return x * (config.background_rms / np.sqrt(np.mean(x ** 2)))


def _placements(config: SynthConfig, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Spindle (start, length) in samples from a Poisson process with dead time.

    After each spindle the process is silent for its duration plus the minimum
    gap; the exponential waiting-time rate is raised to compensate so that the
    long-run rate equals ``rate_per_min``.
    """
    if config.rate_per_min <= 0:
        return []
    fs = config.fs
    n = int(round(config.segment_s * fs))
    gap = int(np.ceil(config.min_gap_s * fs - 1e-9))
    lo_d, hi_d = config.duration_s
    mean_wait = 60.0 / config.rate_per_min - (lo_d + hi_d) / 2 - config.min_gap_s
    out = []
    start = int(np.ceil(rng.exponential(mean_wait) * fs))
    while True:
        length = max(int(round(rng.uniform(lo_d, hi_d) * fs)), 1)
        if start + length > n:
            break
        out.append((start, length))
        start += length + gap + int(np.ceil(rng.exponential(mean_wait) * fs))
    return out


def spindle_waveform(n: int, fs: float, freq: float, phase: float) -> np.ndarray:
    """Hann-enveloped sinusoid with unit RMS over its window."""
    t = np.arange(n) / fs
    w = np.sin(2 * np.pi * freq * t + phase) * np.hanning(n + 2)[1:-1]
    return w / np.sqrt(np.mean(w ** 2))


def gen_segment(config: SynthConfig, seed, subject_id: str = "s0", cohort: str = "younger",
                segment_id: str = "seg0") -> SynthSegment:
    config.validate()
    ss = np.random.SeedSequence(seed)
    bg_seed, ev_seed = ss.spawn(2)
    n = int(round(config.segment_s * config.fs))
    x = gen_background(config, n, bg_seed)
    rng = np.random.default_rng(ev_seed)
    truth = []
    for start, length in _placements(config, rng):
        freq = rng.uniform(*config.freq_hz)
        phase = rng.uniform(0, 2 * np.pi)
        x[start:start + length] += (config.snr * config.background_rms
                                    * spindle_waveform(length, config.fs, freq, phase))
        truth.append(SpindleEvent(start / config.fs, length / config.fs))
    seg = Segment(zscore(x), subject_id, cohort, segment_id, config.fs)
    return SynthSegment(seg, truth)


def _merge(events: list[SpindleEvent]) -> list[SpindleEvent]:
    merged: list[SpindleEvent] = []
    for ev in sorted(events):
        if merged and ev.onset_s <= merged[-1].offset_s:
            last = merged.pop()
            stop = max(last.offset_s, ev.offset_s)
            merged.append(SpindleEvent(last.onset_s, stop - last.onset_s))
        else:
            merged.append(ev)
    return merged


def jitter_annotations(truth: list[SpindleEvent], config: SynthConfig, seed,
                       segment_s: float | None = None, min_duration_s: float = 0.3) -> list[SpindleEvent]:
    """Emulate an imperfect scorer: misses, boundary noise and false alarms.

    Overlapping results are merged; jittered events shorter than
    ``min_duration_s`` are widened around their centre.
    """
    rng = np.random.default_rng(seed)
    segment_s = config.segment_s if segment_s is None else segment_s
    out = []
    for ev in truth:
        if rng.random() < config.miss_prob:
            continue
        if not config.onset_sd_s:
            out.append(ev)
            continue
        start = ev.onset_s + rng.normal(0, config.onset_sd_s)
        stop = ev.offset_s + rng.normal(0, config.onset_sd_s)
        if stop - start < min_duration_s:
            mid = (start + stop) / 2
            start, stop = mid - min_duration_s / 2, mid + min_duration_s / 2
        start = max(start, 0.0)
        stop = min(stop, segment_s)
        if stop > start:
            out.append(SpindleEvent(start, stop - start))
    n_false = rng.poisson(config.false_rate_per_min * segment_s / 60.0)
    lo_d, hi_d = config.duration_s
    for _ in range(n_false):
        # a few placement attempts away from true events, then give up
        for _attempt in range(20):
            dur = rng.uniform(lo_d, hi_d)
            start = rng.uniform(0, max(segment_s - dur, 0.0))
            if all(start + dur <= ev.onset_s or start >= ev.offset_s for ev in truth):
                out.append(SpindleEvent(start, dur))
                break
    return _merge(out)
