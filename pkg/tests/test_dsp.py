"""Signal-conditioning contracts: filter response, smoothing, normalization, beats."""

import numpy as np
import pytest
from scipy import signal as sps

from stressaware.dsp import (
    FilterSpec,
    NnSeries,
    PpgWindow,
    apply_filter,
    condition,
    design_bandpass,
    detect_peaks,
    min_max_normalize,
    moving_average,
    window_to_nn,
)
from stressaware.errors import (
    DegenerateRangeError,
    InsufficientBeatsError,
    ParameterError,
)

FS = 20.0


def analytic_bandpass_gain(freq_hz, spec: FilterSpec):
    """Independent oracle: magnitude of the prewarped analog Butterworth bandpass.

    The bilinear transform maps digital frequency f to analog frequency
    proportional to tan(pi*f/fs); the proportionality constant cancels inside
    the bandpass response, so tan alone suffices.
    """
    w = np.tan(np.pi * np.asarray(freq_hz, dtype=float) / spec.sample_rate)
    wl = np.tan(np.pi * spec.low_cut / spec.sample_rate)
    wh = np.tan(np.pi * spec.high_cut / spec.sample_rate)
    ratio = (w ** 2 - wl * wh) / ((wh - wl) * w)
    return 1.0 / np.sqrt(1.0 + ratio ** (2 * spec.order))


def pulse_train(beat_times_s, duration_s, fs=FS, amplitude=1.0):
    """Ground-truth generator: narrow Gaussian bump at each beat time."""
    t = np.arange(int(round(duration_s * fs))) / fs
    out = np.zeros_like(t)
    for bt in beat_times_s:
        out += amplitude * np.exp(-0.5 * ((t - bt) / 0.05) ** 2)
    return out


class TestFilterDesign:
    def test_gain_at_2hz_near_passband_peak(self):
        spec = FilterSpec()
        grid = np.linspace(spec.low_cut, spec.high_cut, 500)
        peak = analytic_bandpass_gain(grid, spec).max()
        gain = analytic_bandpass_gain(2.0, spec)
        assert 0.95 * peak <= gain <= peak

    def test_stopband_gain_tiny_at_0p1hz(self):
        assert analytic_bandpass_gain(0.1, FilterSpec()) < 0.05

    def test_designed_filter_matches_analytic_response(self):
        spec = FilterSpec()
        sos = design_bandpass(spec)
        freqs = np.linspace(0.05, 9.9, 256)
        _, h = sps.sosfreqz(sos, worN=2 * np.pi * freqs / spec.sample_rate)
        np.testing.assert_allclose(np.abs(h), analytic_bandpass_gain(freqs, spec),
                                   atol=1e-10)

    def test_stopband_monotonic(self):
        spec = FilterSpec()
        sos = design_bandpass(spec)
        low = np.linspace(0.01, spec.low_cut, 100)
        high = np.linspace(spec.high_cut, 9.99, 100)
        for freqs, direction in ((low, 1), (high, -1)):
            _, h = sps.sosfreqz(sos, worN=2 * np.pi * freqs / spec.sample_rate)
            assert np.all(direction * np.diff(np.abs(h)) > 0)

    def test_cutoff_above_nyquist_rejected(self):
        with pytest.raises(ParameterError):
            FilterSpec(high_cut=11.0, sample_rate=20.0)

    def test_cutoff_ordering_rejected(self):
        with pytest.raises(ParameterError):
            FilterSpec(low_cut=3.5, high_cut=0.7)


class TestApplyFilter:
    def test_dc_rejected_after_transient(self):
        sos = design_bandpass(FilterSpec())
        y = apply_filter(sos, np.ones(1200))
        assert np.max(np.abs(y[int(10 * FS):])) < 0.01

    def test_2hz_sine_steady_state_amplitude(self):
        spec = FilterSpec()
        sos = design_bandpass(spec)
        t = np.arange(0, 60, 1 / FS)
        y = apply_filter(sos, np.sin(2 * np.pi * 2.0 * t))
        steady = y[int(20 * FS):]
        amplitude = (steady.max() - steady.min()) / 2
        expected = analytic_bandpass_gain(2.0, spec)
        assert amplitude == pytest.approx(expected, rel=0.05)

    def test_zero_in_zero_out(self):
        y = apply_filter(design_bandpass(FilterSpec()), np.zeros(100))
        np.testing.assert_array_equal(y, np.zeros(100))

    def test_empty_input_rejected(self):
        with pytest.raises(ParameterError):
            apply_filter(design_bandpass(FilterSpec()), np.array([]))

    def test_output_length_matches_input(self):
        y = apply_filter(design_bandpass(FilterSpec()), np.arange(321, dtype=float))
        assert y.shape == (321,)

    def test_linearity(self):
        rng = np.random.default_rng(7)
        sos = design_bandpass(FilterSpec())
        for _ in range(10):
            x = rng.normal(size=400)
            y = rng.normal(size=400)
            a = rng.uniform(-3, 3)
            combined = apply_filter(sos, a * x + y)
            separate = a * apply_filter(sos, x) + apply_filter(sos, y)
            np.testing.assert_allclose(combined, separate, rtol=1e-9, atol=1e-12)


class TestMovingAverage:
    def test_constant_preserved(self):
        out = moving_average(np.full(100, 3.25), window=1.0, sample_rate=FS)
        np.testing.assert_allclose(out, 3.25)

    def test_impulse_plateau(self):
        x = np.zeros(200)
        x[100] = 1.0
        out = moving_average(x, window=1.0, sample_rate=FS)
        plateau = np.flatnonzero(out > 0)
        assert plateau.size == 20
        np.testing.assert_allclose(out[plateau], 1.0 / 20.0)

    def test_alternating_nyquist_matches_direct_mean(self):
        x = np.array([1.0, -1.0] * 50)
        out = moving_average(x, window=1.0, sample_rate=FS)
        # Direct-mean oracle over the same shrink-at-edges windows.
        width, left = 20, 10
        expected = np.array([
            x[max(i - left, 0):min(i + (width - left), x.size)].mean()
            for i in range(x.size)
        ])
        np.testing.assert_allclose(out, expected, atol=1e-12)
        np.testing.assert_allclose(out[left:-left], 0.0, atol=1e-12)

    def test_length_preserved(self):
        assert moving_average(np.arange(57.0), 1.0, FS).shape == (57,)

    def test_window_below_one_sample_rejected(self):
        with pytest.raises(ParameterError):
            moving_average(np.ones(10), window=0.01, sample_rate=FS)


class TestMinMaxNormalize:
    def test_endpoints_and_midpoint(self):
        out, bounds = min_max_normalize(np.array([0.0, 5.0, 10.0]))
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])
        assert bounds == (0.0, 10.0)

    def test_transform_with_bounds_clamps(self):
        out, _ = min_max_normalize(np.array([-2.0, 12.0]), bounds=(0.0, 10.0))
        np.testing.assert_allclose(out, [0.0, 1.0])

    def test_constant_fit_rejected(self):
        with pytest.raises(DegenerateRangeError):
            min_max_normalize(np.array([3.0, 3.0, 3.0]))

    def test_idempotent_on_unit_range(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(size=50)
        x[0], x[1] = 0.0, 1.0
        once, bounds = min_max_normalize(x)
        twice, _ = min_max_normalize(once, bounds=bounds)
        np.testing.assert_array_equal(once, x)
        np.testing.assert_array_equal(twice, once)


class TestDetectPeaks:
    def test_clean_60bpm_train(self):
        beats = 0.5 + np.arange(60)
        nn = detect_peaks(pulse_train(beats, 61), FS)
        assert abs(nn.intervals.size - 59) <= 1
        np.testing.assert_allclose(nn.intervals, 1000.0, atol=20.0)

    def test_flat_signal_rejected(self):
        with pytest.raises(InsufficientBeatsError):
            detect_peaks(np.zeros(400), FS)

    def test_refractory_rejects_spurious_spike(self):
        beats = 0.5 + np.arange(30)
        clean = pulse_train(beats, 31)
        spiked = clean.copy()
        spike_idx = int((beats[10] + 0.1) * FS)
        spiked[spike_idx] += 1.2
        n_clean = detect_peaks(clean, FS).peak_times.size
        n_spiked = detect_peaks(spiked, FS).peak_times.size
        assert n_spiked == n_clean

    def test_peak_times_strictly_increase_and_intervals_plausible(self):
        rng = np.random.default_rng(3)
        times = np.cumsum(rng.uniform(0.7, 1.2, size=50)) + 0.4
        nn = detect_peaks(pulse_train(times, times[-1] + 1), FS)
        assert np.all(np.diff(nn.peak_times) > 0)
        assert nn.intervals.min() >= 300.0
        assert nn.intervals.max() <= 1500.0

    def test_deterministic(self):
        sig = pulse_train(0.5 + np.arange(20), 21)
        a = detect_peaks(sig, FS)
        b = detect_peaks(sig, FS)
        np.testing.assert_array_equal(a.peak_times, b.peak_times)
        np.testing.assert_array_equal(a.intervals, b.intervals)

    def test_too_short_signal_rejected(self):
        with pytest.raises(ParameterError):
            detect_peaks(np.ones(100), FS)


class TestDomainTypes:
    def test_ppg_window_validation(self):
        with pytest.raises(ParameterError):
            PpgWindow(subject_id="s", start_time=0.0, samples=np.array([]))
        with pytest.raises(ParameterError):
            PpgWindow(subject_id="s", start_time=0.0, samples=np.ones(10), sample_rate=0)

    def test_ppg_window_hour(self):
        w = PpgWindow(subject_id="s", start_time=86400.0 + 6 * 3600.0, samples=np.ones(10))
        assert w.hour_of_day == 6.0
        assert w.duration == pytest.approx(0.5)

    def test_nn_series_validation(self):
        with pytest.raises(ParameterError):
            NnSeries(intervals=np.array([800.0]), peak_times=np.array([0.0]))
        with pytest.raises(ParameterError):
            NnSeries(intervals=np.array([-5.0]), peak_times=np.array([0.0, 1.0]))

    def test_window_to_nn_end_to_end(self):
        beats = 0.5 + np.arange(110) * 0.85
        raw = pulse_train(beats, 96)
        window = PpgWindow(subject_id="s", start_time=0.0, samples=raw)
        nn = window_to_nn(window)
        assert nn.intervals.size > 80
        np.testing.assert_allclose(nn.intervals.mean(), 850.0, atol=30.0)

    def test_condition_preserves_length(self):
        assert condition(np.random.default_rng(0).normal(size=2400)).shape == (2400,)
