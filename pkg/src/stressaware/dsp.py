"""PPG signal conditioning: bandpass filtering, smoothing, normalization, beat detection.

All functions are pure; arrays are never modified in place. The default
pipeline for a raw 2-minute wrist window is::

    sos = design_bandpass(FilterSpec())
    conditioned = moving_average(apply_filter(sos, window.samples),
                                 sample_rate=window.sample_rate)
    nn = detect_peaks(conditioned, window.sample_rate)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as _signal
from scipy.ndimage import maximum_filter1d, minimum_filter1d

from .errors import DegenerateRangeError, InsufficientBeatsError, ParameterError

SECONDS_PER_DAY = 86400.0

# Accepted beats must imply an instantaneous heart rate in [40, 200] BPM.
MIN_NN_MS = 300.0
MAX_NN_MS = 1500.0
REFRACTORY_S = 0.3


@dataclass(frozen=True)
class FilterSpec:
    """Butterworth bandpass parameters for wrist PPG (defaults: 0.7-3.5 Hz, order 3, 20 Hz)."""

    low_cut: float = 0.7
    high_cut: float = 3.5
    order: int = 3
    sample_rate: float = 20.0

    def __post_init__(self):
        if self.order < 1:
            raise ParameterError(f"filter order must be >= 1, got {self.order}")
        nyquist = self.sample_rate / 2.0
        if not (0.0 < self.low_cut < self.high_cut < nyquist):
            raise ParameterError(
                "cutoffs must satisfy 0 < low_cut < high_cut < sample_rate/2, got "
                f"low={self.low_cut}, high={self.high_cut}, fs={self.sample_rate}"
            )


@dataclass(frozen=True)
class PpgWindow:
    """One raw PPG burst: 2 minutes at 20 Hz by default.

    ``start_time`` is civil time in seconds; hour of day is
    ``(start_time % 86400) / 3600``.
    """

    subject_id: str
    start_time: float
    samples: np.ndarray
    sample_rate: float = 20.0

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ParameterError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1 or samples.size == 0:
            raise ParameterError("samples must be a non-empty 1-D sequence")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def hour_of_day(self) -> float:
        return (self.start_time % SECONDS_PER_DAY) / 3600.0


@dataclass(frozen=True)
class NnSeries:
    """Detected beats: peak times in seconds and the NN intervals between them in ms."""

    intervals: np.ndarray
    peak_times: np.ndarray

    def __post_init__(self):
        intervals = np.asarray(self.intervals, dtype=float)
        peak_times = np.asarray(self.peak_times, dtype=float)
        if intervals.size != peak_times.size - 1:
            raise ParameterError(
                f"need count(intervals) == count(peak_times) - 1, got "
                f"{intervals.size} and {peak_times.size}"
            )
        if intervals.size and intervals.min() <= 0:
            raise ParameterError("every NN interval must be positive")
        object.__setattr__(self, "intervals", intervals)
        object.__setattr__(self, "peak_times", peak_times)

    @property
    def duration(self) -> float:
        """Seconds spanned by the detected beats."""
        return float(self.peak_times[-1] - self.peak_times[0]) if self.peak_times.size else 0.0


def design_bandpass(spec: FilterSpec) -> np.ndarray:
    """Design the Butterworth bandpass as cascaded second-order sections.

    SOS realization keeps the order-3 design numerically stable at the low
    normalized cutoffs a 20 Hz sampling rate implies.
    """
    nyquist = spec.sample_rate / 2.0
    return _signal.butter(
        spec.order, [spec.low_cut / nyquist, spec.high_cut / nyquist],
        btype="bandpass", output="sos",
    )


def apply_filter(sos: np.ndarray, samples: np.ndarray) -> np.ndarray:
    """Run the filter causally (forward only, matching streaming use)."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ParameterError("cannot filter an empty sequence")
    return _signal.sosfilt(sos, samples)


def moving_average(samples: np.ndarray, window: float = 1.0,
                   sample_rate: float = 20.0) -> np.ndarray:
    """Centered moving-average smoother over ``window`` seconds.

    Boundary windows shrink to the valid range instead of padding, so the
    output never contains phantom zeros. Output length equals input length.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ParameterError("cannot smooth an empty sequence")
    width = int(round(window * sample_rate))
    if width < 1:
        raise ParameterError(
            f"window of {window} s at {sample_rate} Hz holds no samples"
        )
    # Even widths take the extra sample on the left of center.
    left = width // 2
    right = width - 1 - left
    n = samples.size
    csum = np.concatenate(([0.0], np.cumsum(samples)))
    idx = np.arange(n)
    lo = np.maximum(idx - left, 0)
    hi = np.minimum(idx + right + 1, n)
    return (csum[hi] - csum[lo]) / (hi - lo)


def min_max_normalize(samples: np.ndarray,
                      bounds: tuple[float, float] | None = None,
                      ) -> tuple[np.ndarray, tuple[float, float]]:
    """Scale to [0, 1]; returns the scaled sequence and the bounds used.

    With ``bounds=None`` the bounds are fitted from ``samples`` (a constant
    input is a hard error: it indicates a dead sensor, not a unit signal).
    With explicit bounds the transform clamps results into [0, 1], which is
    how test-time data is mapped through bounds fitted on a training split.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ParameterError("cannot normalize an empty sequence")
    if bounds is None:
        low, high = float(samples.min()), float(samples.max())
        if high <= low:
            raise DegenerateRangeError(
                f"degenerate range: min == max == {low}; cannot fit bounds"
            )
    else:
        low, high = float(bounds[0]), float(bounds[1])
        if high <= low:
            raise ParameterError(f"invalid bounds ({low}, {high})")
    scaled = (samples - low) / (high - low)
    return np.clip(scaled, 0.0, 1.0), (low, high)


def _local_maxima(x: np.ndarray) -> np.ndarray:
    """Indices of strict-left / non-strict-right local maxima (plateau keeps its first sample)."""
    interior = np.flatnonzero((x[1:-1] > x[:-2]) & (x[1:-1] >= x[2:])) + 1
    return interior


def _enforce_refractory(times: np.ndarray, refractory: float) -> np.ndarray:
    """Greedy in time order: a peak closer than ``refractory`` to the last kept one is dropped."""
    kept: list[float] = []
    keep_idx: list[int] = []
    for i, t in enumerate(times):
        if not kept or t - kept[-1] >= refractory:
            kept.append(t)
            keep_idx.append(i)
    return np.asarray(keep_idx, dtype=int)


def _longest_plausible_run(times: np.ndarray) -> np.ndarray:
    """Longest contiguous run of peaks whose successive intervals all lie in [300, 1500] ms."""
    if times.size < 2:
        return times
    gaps_ms = np.diff(times) * 1000.0
    ok = (gaps_ms >= MIN_NN_MS) & (gaps_ms <= MAX_NN_MS)
    best_start, best_len = 0, 1
    start, length = 0, 1
    for i, good in enumerate(ok):
        if good:
            length += 1
        else:
            start, length = i + 1, 1
        if length > best_len:
            best_start, best_len = start, length
    return times[best_start:best_start + best_len]


def detect_peaks(samples: np.ndarray, sample_rate: float) -> NnSeries:
    """Adaptive-threshold beat detection on a conditioned PPG sequence.

    Candidate peaks are local maxima above ``rolling mean + k * rolling
    amplitude``; ``k`` is swept over 0.05..0.30 and the value minimizing the
    count of physiologically implausible intervals (outside 300-1500 ms) is
    kept. Peaks inside the 0.3 s refractory window after an accepted beat are
    rejected. The returned series is the longest contiguous run of plausible
    beats, so every NN interval maps to an instantaneous rate in [40, 200] BPM.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size < 10 * sample_rate:
        raise ParameterError("peak detection needs at least 10 s of signal")

    stat_width = max(int(round(sample_rate)), 1)
    rolling_mean = moving_average(samples, window=1.0, sample_rate=sample_rate)
    rolling_amp = (
        maximum_filter1d(samples, size=stat_width, mode="nearest")
        - minimum_filter1d(samples, size=stat_width, mode="nearest")
    )

    maxima = _local_maxima(samples)
    if maxima.size == 0:
        raise InsufficientBeatsError("no candidate peaks found")

    best_times: np.ndarray | None = None
    best_bad = None
    for k in (0.05, 0.10, 0.15, 0.20, 0.25, 0.30):
        threshold = rolling_mean[maxima] + k * rolling_amp[maxima]
        cand = maxima[samples[maxima] > threshold]
        times = cand / sample_rate
        times = times[_enforce_refractory(times, REFRACTORY_S)]
        if times.size < 2:
            continue
        gaps_ms = np.diff(times) * 1000.0
        bad = int(np.sum((gaps_ms < MIN_NN_MS) | (gaps_ms > MAX_NN_MS)))
        # Ties break toward the larger k: spurious low-threshold peaks produce
        # short-but-plausible intervals the count cannot see, while beats a
        # high threshold misses do register as implausible >1500 ms gaps.
        if best_bad is None or bad <= best_bad:
            best_bad = bad
            best_times = times

    if best_times is None:
        raise InsufficientBeatsError("fewer than 2 peaks at every threshold")

    times = _longest_plausible_run(best_times)
    if times.size < 2:
        raise InsufficientBeatsError("no plausible beat sequence found")
    intervals = np.diff(times) * 1000.0
    return NnSeries(intervals=intervals, peak_times=times)


def condition(samples: np.ndarray, spec: FilterSpec | None = None,
              smooth_window: float = 0.15) -> np.ndarray:
    """Bandpass then smooth, the standard cleaning chain before beat detection.

    The detection smoother defaults to 0.15 s: a boxcar spanning a full
    cardiac period (1 s at 60 BPM) averages the pulse train to a constant
    and would erase every beat, so the long window is reserved for trend
    estimation, not this chain.
    """
    spec = spec or FilterSpec()
    filtered = apply_filter(design_bandpass(spec), samples)
    return moving_average(filtered, window=smooth_window, sample_rate=spec.sample_rate)


def window_to_nn(window: PpgWindow, spec: FilterSpec | None = None) -> NnSeries:
    """Full conditioning + beat detection for one raw window."""
    spec = spec or FilterSpec(sample_rate=window.sample_rate)
    return detect_peaks(condition(window.samples, spec), window.sample_rate)
