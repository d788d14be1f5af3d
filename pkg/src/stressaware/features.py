"""HRV feature extraction and contextual feature encoding.

The 12 HRV features and the 22-slot context encoding below form the fixed
feature order shared with dataset files and model artifacts; `feature_names`
is the single source of truth for that order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .dsp import NnSeries
from .errors import EncodingError, InsufficientBeatsError, ParameterError

HRV_FEATURE_NAMES = (
    "bpm", "ibi", "sdnn", "sdsd", "rmssd", "pnn20", "pnn50",
    "hr_mad", "sd1", "sd2", "s", "br",
)

# Code tables for the categorical phone-context fields. The raw streams carry
# integer codes; encoding one-hots them in this order.
CALL_TYPES = ("incoming", "outgoing", "missed")
MESSAGE_TYPES = ("received", "sent")
NOTIFICATION_SOURCES = ("messaging", "email", "social", "system", "other")

CONTEXT_FEATURE_NAMES = (
    "call_duration",
    *(f"call_type={name}" for name in CALL_TYPES),
    "call_count",
    *(f"notification_source={name}" for name in NOTIFICATION_SOURCES),
    "notification_count",
    "screen_touch_count",
    "battery_charge_duration",
    "battery_level",
    *(f"message_type={name}" for name in MESSAGE_TYPES),
    "message_count",
    "hour_sin",
    "hour_cos",
    "longitude",
    "latitude",
    "altitude",
)

CONTEXT_ARITY = len(CONTEXT_FEATURE_NAMES)

RESP_BAND_HZ = (0.1, 0.4)
RESP_BAND_CENTER_BPM = 15.0
TACHOGRAM_RATE_HZ = 4.0


def feature_names(include_context: bool = True) -> tuple[str, ...]:
    """The documented fixed feature order: 12 HRV names, then the context encoding."""
    if include_context:
        return HRV_FEATURE_NAMES + CONTEXT_FEATURE_NAMES
    return HRV_FEATURE_NAMES


@dataclass(frozen=True)
class HrvFeatures:
    """Time-domain and Poincare HRV statistics for one window, plus breathing rate."""

    bpm: float
    ibi: float
    sdnn: float
    sdsd: float
    rmssd: float
    pnn20: float
    pnn50: float
    hr_mad: float
    sd1: float
    sd2: float
    s: float
    br: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in HRV_FEATURE_NAMES], dtype=float)


@dataclass(frozen=True)
class ContextSnapshot:
    """Raw phone-context readings accumulated over one sensing interval."""

    timestamp: float
    call_duration: float = 0.0
    call_type: int = 0
    call_count: int = 0
    notification_source: int = 0
    notification_count: int = 0
    screen_touch_count: int = 0
    battery_charge_duration: float = 0.0
    battery_level: float = 1.0
    message_type: int = 0
    message_count: int = 0
    hour: float = 0.0
    longitude: float = 0.0
    latitude: float = 0.0
    altitude: float = 0.0

    def __post_init__(self):
        for name in ("call_count", "notification_count", "screen_touch_count",
                     "message_count"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        if not 0.0 <= self.battery_level <= 1.0:
            raise ParameterError(f"battery_level must be in [0, 1], got {self.battery_level}")
        if not 0.0 <= self.hour < 24.0:
            raise ParameterError(f"hour must be in [0, 24), got {self.hour}")


@dataclass(frozen=True)
class FeatureVector:
    """One classification sample: HRV block, optional context block, metadata."""

    subject_id: str
    timestamp: float
    hrv: HrvFeatures
    context: np.ndarray | None = None
    label5: int | None = None

    def __post_init__(self):
        if self.context is not None:
            context = np.asarray(self.context, dtype=float)
            if context.shape != (CONTEXT_ARITY,):
                raise ParameterError(
                    f"context encoding must have arity {CONTEXT_ARITY}, got {context.shape}"
                )
            object.__setattr__(self, "context", context)
        if self.label5 is not None and self.label5 not in (1, 2, 3, 4, 5):
            raise ParameterError(f"label5 must be in 1..5, got {self.label5}")

    def values(self, include_context: bool = True) -> np.ndarray:
        hrv = self.hrv.as_array()
        if not include_context:
            return hrv
        if self.context is None:
            raise ParameterError("feature vector carries no context block")
        return np.concatenate([hrv, self.context])


class BreathingEstimate(NamedTuple):
    rate: float
    confident: bool


def _population_std(values: np.ndarray) -> float:
    return float(np.sqrt(np.mean((values - values.mean()) ** 2)))


def estimate_breathing_rate(nn: NnSeries) -> BreathingEstimate:
    """Breaths per minute from the respiratory-band peak of the tachogram.

    The NN series is resampled evenly at 4 Hz, mean-removed, and the dominant
    frequency inside 0.1-0.4 Hz is read off the FFT. A spectrum with no clear
    band peak (e.g. a constant series) falls back to the band center of
    15 breaths/min with ``confident=False`` so the feature vector stays total.
    """
    if nn.duration < 30.0:
        raise InsufficientBeatsError(
            f"breathing estimation needs >= 30 s of beats, got {nn.duration:.1f} s"
        )
    beat_times = nn.peak_times[1:]
    step = 1.0 / TACHOGRAM_RATE_HZ
    grid = np.arange(beat_times[0], beat_times[-1], step)
    tachogram = np.interp(grid, beat_times, nn.intervals)
    centered = tachogram - tachogram.mean()

    mean_nn = float(np.mean(nn.intervals))
    if _population_std(centered) < 1e-6 * mean_nn:
        return BreathingEstimate(RESP_BAND_CENTER_BPM, confident=False)

    power = np.abs(np.fft.rfft(centered)) ** 2
    freqs = np.fft.rfftfreq(centered.size, d=step)
    band = (freqs >= RESP_BAND_HZ[0]) & (freqs <= RESP_BAND_HZ[1])
    if not band.any():
        return BreathingEstimate(RESP_BAND_CENTER_BPM, confident=False)
    band_power = power[band]
    band_freqs = freqs[band]
    peak = int(np.argmax(band_power))
    confident = band_power[peak] >= 3.0 * float(np.mean(band_power))
    if not confident:
        return BreathingEstimate(RESP_BAND_CENTER_BPM, confident=False)
    rate = float(np.clip(60.0 * band_freqs[peak], 6.0, 24.0))
    return BreathingEstimate(rate, confident=True)


def extract_hrv_features(nn: NnSeries) -> HrvFeatures:
    """All 12 HRV features of an NN series.

    Standard deviations are population (not sample) deviations, and the pNN
    fractions use strict inequality, so an independent direct-formula
    recomputation matches bit-for-bit up to float rounding.
    """
    intervals = nn.intervals
    if intervals.size < 4:
        raise InsufficientBeatsError(
            f"HRV extraction needs >= 4 NN intervals, got {intervals.size}"
        )
    diffs = np.diff(intervals)
    ibi = float(np.mean(intervals))
    sdnn = _population_std(intervals)
    sdsd = _population_std(diffs)
    rmssd = float(np.sqrt(np.mean(diffs ** 2)))
    pnn20 = float(np.mean(np.abs(diffs) > 20.0))
    pnn50 = float(np.mean(np.abs(diffs) > 50.0))
    hr_mad = float(np.median(np.abs(intervals - np.median(intervals))))
    sd1 = math.sqrt(sdsd ** 2 / 2.0)
    # Tiny negative values from cancellation are clamped before the sqrt.
    sd2 = math.sqrt(max(0.0, 2.0 * sdnn ** 2 - sdsd ** 2 / 2.0))
    ellipse_area = math.pi * sd1 * sd2

    if nn.duration >= 30.0:
        br = estimate_breathing_rate(nn).rate
    else:
        br = RESP_BAND_CENTER_BPM
    return HrvFeatures(
        bpm=60000.0 / ibi, ibi=ibi, sdnn=sdnn, sdsd=sdsd, rmssd=rmssd,
        pnn20=pnn20, pnn50=pnn50, hr_mad=hr_mad, sd1=sd1, sd2=sd2,
        s=ellipse_area, br=br,
    )


def _one_hot(code: int, table: tuple[str, ...], field: str) -> np.ndarray:
    if not 0 <= code < len(table):
        raise EncodingError(
            f"unknown {field} code {code}; known codes 0..{len(table) - 1} ({', '.join(table)})"
        )
    row = np.zeros(len(table))
    row[code] = 1.0
    return row


def encode_context(snapshot: ContextSnapshot) -> np.ndarray:
    """Fixed-order numeric encoding of a context snapshot (arity 22).

    Categorical codes are one-hot per the module code tables, the hour maps
    onto the unit circle, and everything else passes through as magnitudes.
    """
    angle = 2.0 * math.pi * snapshot.hour / 24.0
    parts = [
        [snapshot.call_duration],
        _one_hot(snapshot.call_type, CALL_TYPES, "call_type"),
        [float(snapshot.call_count)],
        _one_hot(snapshot.notification_source, NOTIFICATION_SOURCES, "notification_source"),
        [float(snapshot.notification_count)],
        [float(snapshot.screen_touch_count)],
        [snapshot.battery_charge_duration],
        [snapshot.battery_level],
        _one_hot(snapshot.message_type, MESSAGE_TYPES, "message_type"),
        [float(snapshot.message_count)],
        [math.sin(angle), math.cos(angle)],
        [snapshot.longitude, snapshot.latitude, snapshot.altitude],
    ]
    encoded = np.concatenate([np.asarray(p, dtype=float) for p in parts])
    assert encoded.shape == (CONTEXT_ARITY,)
    return encoded


def assemble_feature_vector(hrv: HrvFeatures, context: np.ndarray | None,
                            subject_id: str, timestamp: float,
                            label5: int | None = None) -> FeatureVector:
    """Bundle an HRV block and an encoded context block with their metadata."""
    return FeatureVector(
        subject_id=subject_id, timestamp=timestamp, hrv=hrv,
        context=context, label5=label5,
    )
