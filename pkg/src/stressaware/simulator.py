"""Synthetic cohort generation: latent stress, wrist PPG, phone context, EMA behavior.

Stands in for recruited participants. Everything is a pure function of
(config, seed): subjects get disjoint RNG streams, and per-burst draws are
keyed by (subject seed, burst index), so the physiological stream is
identical no matter which query policy later runs on top of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .agent import hour_of
from .dsp import PpgWindow
from .errors import ParameterError
from .features import ContextSnapshot

BURSTS_PER_HOUR = 4          # one 2-minute burst per 15 minutes
LABEL_HORIZON_S = 900.0      # a sample inherits the nearest answer within 15 min

EVENT_PPG_BURST = "ppg_burst"
EVENT_EMA_DELIVERED = "ema_delivered"
EVENT_EMA_ANSWERED = "ema_answered"
EVENT_EMA_IGNORED = "ema_ignored"

# Answered labels, conditioned on the latent state: stressed mass sits on 4-5,
# calm mass on 1-3 (skewed low, like free-living reports).
STRESSED_LABEL_P = {4: 0.6, 5: 0.4}
CALM_LABEL_P = {1: 0.45, 2: 0.35, 3: 0.2}

# Baseline per-hour probability that a delivered prompt gets answered;
# low during focused work blocks, high around lunch and evenings.
BASE_RESPONSIVENESS = np.array([
    0.10, 0.10, 0.10, 0.10, 0.10, 0.15,   # 0-5 (rarely worn)
    0.35, 0.55, 0.50, 0.30, 0.25, 0.40,   # 6-11
    0.75, 0.70, 0.35, 0.30, 0.40, 0.60,   # 12-17
    0.80, 0.85, 0.80, 0.70, 0.50, 0.25,   # 18-23
])


@dataclass(frozen=True)
class SubjectProfile:
    """Generator parameters for one synthetic participant."""

    subject_id: str
    seed: int
    baseline_hr: float = 70.0
    hr_stress_gain: float = 12.0
    hrv_stress_attenuation: float = 0.45
    br_stress_gain: float = 3.0       # breaths/min added under stress
    context_stress_coupling: float = 0.8  # how strongly phone context tracks stress
    variability_scale: float = 1.0    # vagal tone: scales resting NN variability
    stress_on_rate: float = 0.10      # per hour, before circadian modulation
    stress_off_rate: float = 0.50     # per hour
    circadian_amplitude: float = 1.5  # midday multiplier on the on-rate
    responsiveness: tuple = tuple(BASE_RESPONSIVENESS)
    response_delay_mean_s: float = 120.0
    annoyance_decay: float = 0.93     # responsiveness multiplier per query already sent today
    label_noise: float = 0.15
    resp_freq_hz: float = 0.25
    ppg_noise: float = 0.05
    wear_start_hour: float = 6.5
    wear_hours: float = 16.0

    def __post_init__(self):
        if not 50.0 <= self.baseline_hr <= 90.0:
            raise ParameterError(f"baseline_hr must be in [50, 90], got {self.baseline_hr}")
        rates = np.asarray(self.responsiveness, dtype=float)
        if rates.shape != (24,) or rates.min() < 0 or rates.max() > 1:
            raise ParameterError("responsiveness must be 24 values in [0, 1]")
        object.__setattr__(self, "responsiveness", tuple(float(r) for r in rates))


@dataclass(frozen=True)
class SimEvent:
    kind: str
    timestamp: float
    subject_id: str
    payload: dict = field(default_factory=dict)


@dataclass
class Cohort:
    """Profiles plus each subject's burst stream (timestamps and latent stress)."""

    seed: int
    days: int
    heterogeneity: float
    profiles: list[SubjectProfile]
    bursts: dict[str, list[SimEvent]]

    def profile(self, subject_id: str) -> SubjectProfile:
        for p in self.profiles:
            if p.subject_id == subject_id:
                return p
        raise ParameterError(f"unknown subject {subject_id}")


def _circadian_bump(hour: float) -> float:
    """Midday-peaked shape in [0, 1] (peak near 14:00)."""
    return math.exp(-0.5 * ((hour - 14.0) / 4.0) ** 2)


def make_profile(subject_id: str, seed: int, heterogeneity: float = 1.0) -> SubjectProfile:
    """Draw one subject's parameters around the cohort defaults.

    ``heterogeneity`` scales every inter-subject deviation; 0 produces an
    identical-twin cohort (only the seeds differ), which is the control
    condition for personalization studies. Heterogeneity spreads not just the
    baselines but the stress signature itself (heart-rate gain, variability
    attenuation, breathing shift, context coupling), so a model pooled over
    other subjects genuinely misfits an idiosyncratic individual.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0F]))
    h = float(heterogeneity)
    responsiveness = np.clip(
        BASE_RESPONSIVENESS + h * rng.uniform(-0.15, 0.15, size=24), 0.05, 0.95
    )
    return SubjectProfile(
        subject_id=subject_id,
        seed=seed,
        baseline_hr=float(np.clip(70.0 + h * rng.uniform(-15.0, 15.0), 56.0, 88.0)),
        hr_stress_gain=float(np.clip(12.0 + h * rng.uniform(-11.0, 11.0), 2.0, 26.0)),
        hrv_stress_attenuation=float(np.clip(0.45 + h * rng.uniform(-0.38, 0.3), 0.05, 0.8)),
        br_stress_gain=float(np.clip(3.5 + h * rng.uniform(-3.5, 3.5), 0.0, 7.0)),
        context_stress_coupling=float(np.clip(0.9 + h * rng.uniform(-0.9, 0.9), 0.0, 1.8)),
        variability_scale=float(np.clip(1.1 + h * rng.uniform(-0.5, 0.5), 0.6, 1.6)),
        stress_on_rate=float(np.clip(0.10 + h * rng.uniform(-0.04, 0.06), 0.02, 0.3)),
        stress_off_rate=float(np.clip(0.50 + h * rng.uniform(-0.15, 0.2), 0.2, 1.0)),
        circadian_amplitude=1.5 + h * float(rng.uniform(-0.5, 0.5)),
        responsiveness=tuple(responsiveness),
        response_delay_mean_s=float(np.clip(120.0 + h * rng.uniform(-60.0, 120.0), 30.0, 400.0)),
        annoyance_decay=float(np.clip(0.93 + h * rng.uniform(-0.08, 0.04), 0.7, 0.99)),
        label_noise=float(np.clip(0.15 + h * rng.uniform(-0.05, 0.1), 0.0, 0.3)),
        resp_freq_hz=float(np.clip(0.25 + h * rng.uniform(-0.05, 0.05), 0.15, 0.35)),
        ppg_noise=float(np.clip(0.05 + h * rng.uniform(0.0, 0.04), 0.0, 0.15)),
        wear_start_hour=float(np.clip(6.5 + h * rng.uniform(-0.5, 0.5), 5.0, 8.0)),
    )


def synth_cohort(n_subjects: int, days: int, seed: int,
                 heterogeneity: float = 1.0, wear_hours: float = 16.0) -> Cohort:
    """Generate the cohort: one burst per subject per 15 minutes of wear time.

    The latent two-state stress process advances on the burst grid with
    per-hour rates modulated by a midday circadian bump, so stress episodes
    cluster in the afternoon and persist for a couple of hours.
    """
    if n_subjects < 1 or days < 1:
        raise ParameterError("need n_subjects >= 1 and days >= 1")
    root = np.random.SeedSequence(seed)
    subject_seeds = [int(s.generate_state(1)[0]) for s in root.spawn(n_subjects)]
    profiles = []
    bursts: dict[str, list[SimEvent]] = {}
    for i, subject_seed in enumerate(subject_seeds):
        subject_id = f"subj-{i:03d}"
        profile = make_profile(subject_id, subject_seed, heterogeneity)
        profile = SubjectProfile(**{**profile.__dict__, "wear_hours": wear_hours})
        rng = np.random.default_rng(np.random.SeedSequence([subject_seed, 0x57A7E]))
        stream: list[SimEvent] = []
        stressed = False
        index = 0
        n_bursts = int(round(profile.wear_hours * BURSTS_PER_HOUR))
        for day in range(days):
            day_start_hour = profile.wear_start_hour + float(rng.uniform(-0.25, 0.25))
            for k in range(n_bursts):
                hour = day_start_hour + k / BURSTS_PER_HOUR
                timestamp = day * 86400.0 + hour * 3600.0
                on_rate = profile.stress_on_rate * (
                    1.0 + profile.circadian_amplitude * _circadian_bump(hour % 24.0)
                )
                if stressed:
                    if rng.random() < min(profile.stress_off_rate / BURSTS_PER_HOUR, 0.95):
                        stressed = False
                else:
                    if rng.random() < min(on_rate / BURSTS_PER_HOUR, 0.95):
                        stressed = True
                stream.append(SimEvent(
                    kind=EVENT_PPG_BURST, timestamp=timestamp, subject_id=subject_id,
                    payload={"latent_stress": int(stressed), "index": index},
                ))
                index += 1
        profiles.append(profile)
        bursts[subject_id] = stream
    return Cohort(seed=seed, days=days, heterogeneity=heterogeneity,
                  profiles=profiles, bursts=bursts)


def burst_rng(profile: SubjectProfile, burst_index: int, purpose: int) -> np.random.Generator:
    """Deterministic stream for one burst; ``purpose`` separates waveform/context/label draws."""
    return np.random.default_rng(
        np.random.SeedSequence([profile.seed, burst_index, purpose])
    )


def generate_ppg_waveform(profile: SubjectProfile, latent_stress: int,
                          rng: np.random.Generator, duration: float = 120.0,
                          rate: float = 20.0, start_time: float = 0.0) -> PpgWindow:
    """One raw burst: a double-bump pulse train with stress-dependent dynamics.

    Instantaneous heart rate is baseline plus the stress gain, modulated by
    respiratory sinus arrhythmia and beat-to-beat jitter; under stress both
    variability terms shrink by the profile's attenuation. Broadband noise and
    sub-band baseline wander are added on top.
    """
    n = int(round(duration * rate))
    hr = profile.baseline_hr + latent_stress * profile.hr_stress_gain
    base_ibi = 60.0 / hr
    vscale = profile.variability_scale * (
        1.0 - profile.hrv_stress_attenuation * latent_stress
    )
    resp_freq = profile.resp_freq_hz + latent_stress * profile.br_stress_gain / 60.0

    impulses = np.zeros(n)
    t = float(rng.uniform(0.0, base_ibi))
    while t < duration:
        idx = int(round(t * rate))
        if idx < n:
            impulses[idx] = 1.0 + 0.05 * rng.normal()
        ibi = base_ibi * (
            1.0
            + 0.05 * vscale * math.sin(2.0 * math.pi * resp_freq * t)
            + 0.03 * vscale * rng.normal()
        )
        t += max(ibi, 0.3)

    # Per-beat shape: diastolic trough, systolic peak, dicrotic bump. The
    # dicrotic sits 0.25 s after the peak, inside the detector's 0.3 s
    # refractory window, and the leading trough keeps the causally filtered
    # waveform's inter-beat ripple well below the systolic peaks.
    tau = np.arange(-0.5, 1.2, 1.0 / rate)
    template = (
        np.exp(-0.5 * (tau / 0.1) ** 2)
        + 0.2 * np.exp(-0.5 * ((tau - 0.25) / 0.09) ** 2)
        - 0.5 * np.exp(-0.5 * ((tau + 0.22) / 0.12) ** 2)
    )
    pulse = np.convolve(impulses, template, mode="full")
    offset = int(round(0.5 * rate))
    samples = pulse[offset:offset + n]

    grid = np.arange(n) / rate
    wander = 0.25 * np.sin(2.0 * math.pi * 0.1 * grid + rng.uniform(0, 2 * math.pi))
    noise = rng.normal(0.0, profile.ppg_noise, size=n)
    return PpgWindow(subject_id=profile.subject_id, start_time=start_time,
                     samples=samples + wander + noise, sample_rate=rate)


def generate_context(profile: SubjectProfile, timestamp: float, latent_stress: int,
                     rng: np.random.Generator) -> ContextSnapshot:
    """Phone-context snapshot for one burst; rates lean on hour and (weakly) stress.

    Stressed intervals see more notifications and screen churn, which gives
    the context block genuine predictive value on top of the HRV block.
    """
    hour = hour_of(timestamp)
    boost = 1.0 + profile.context_stress_coupling * latent_stress
    day_phase = 1.0 if 8.0 <= hour <= 22.0 else 0.3
    return ContextSnapshot(
        timestamp=timestamp,
        call_duration=float(rng.exponential(40.0) * day_phase),
        call_type=int(rng.integers(0, 3)),
        call_count=int(rng.poisson(0.3 * day_phase)),
        notification_source=int(rng.integers(0, 5)),
        notification_count=int(rng.poisson(3.0 * day_phase * boost)),
        screen_touch_count=int(rng.poisson(25.0 * day_phase * boost)),
        battery_charge_duration=float(rng.exponential(300.0)),
        battery_level=float(np.clip(1.0 - (hour - 6.0) / 24.0 + rng.normal(0, 0.05), 0.05, 1.0)),
        message_type=int(rng.integers(0, 2)),
        message_count=int(rng.poisson(2.0 * day_phase)),
        hour=hour,
        longitude=-117.84 + float(rng.normal(0, 0.01)) + (0.03 if 9 <= hour <= 17 else 0.0),
        latitude=33.64 + float(rng.normal(0, 0.01)),
        altitude=20.0 + float(rng.normal(0, 3.0)),
    )


def draw_label5(latent_stress: int, label_noise: float, rng: np.random.Generator) -> int:
    """Five-point report conditioned on the latent state, with a noise flip."""
    group_stressed = bool(latent_stress)
    if label_noise > 0 and rng.random() < label_noise:
        group_stressed = not group_stressed
    table = STRESSED_LABEL_P if group_stressed else CALM_LABEL_P
    labels = list(table.keys())
    probs = list(table.values())
    return int(rng.choice(labels, p=probs))


def deliver_ema(profile: SubjectProfile, timestamp: float, recent_query_count: int,
                latent_stress: int, rng: np.random.Generator) -> SimEvent:
    """Simulate prompting the subject; answer odds decay with queries already sent.

    Returns an answered event (with the label and the delayed answer time) or
    an ignored event.
    """
    hour = int(hour_of(timestamp))
    p_answer = profile.responsiveness[hour] * profile.annoyance_decay ** recent_query_count
    if rng.random() < p_answer:
        delay = float(rng.exponential(profile.response_delay_mean_s))
        label5 = draw_label5(latent_stress, profile.label_noise, rng)
        return SimEvent(
            kind=EVENT_EMA_ANSWERED, timestamp=timestamp + delay,
            subject_id=profile.subject_id,
            payload={"label5": label5, "delivered_at": timestamp},
        )
    return SimEvent(kind=EVENT_EMA_IGNORED, timestamp=timestamp,
                    subject_id=profile.subject_id, payload={"delivered_at": timestamp})


def label_attach(sample_time: float, ema_answers: list[tuple[float, int]]) -> int | None:
    """Label of the nearest answer at or after the sample, inside the 15-minute horizon."""
    best_time = None
    best_label = None
    for answer_time, label5 in ema_answers:
        if sample_time <= answer_time <= sample_time + LABEL_HORIZON_S:
            if best_time is None or answer_time < best_time:
                best_time = answer_time
                best_label = label5
    return best_label
