"""Deterministic synthetic gait generator.

Each channel is a sum of three harmonics of a (slowly jittering) cadence,
plus Gaussian noise and a constant gravity offset on the vertical axes. The
scenario bands below are modeling choices that make the five classes
distinguishable in roughly the way real recordings are: idle is flat, walk is
slow and moderate, run is fast and strong, hopping puts its energy on the
vertical axes with both legs in phase, and skip alternates a strong and a weak
step (energy at half the cadence).

Three anomalous profiles exist for the anomaly scorer: ``stumble`` (walk
interrupted by large jolts), ``drag`` (slow gait with heavy horizontal sway)
and ``freeze`` (stop-and-tremble episodes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Union

import numpy as np

from gaitdiag.classifier import GaitLabel, LabeledDataset
from gaitdiag.errors import InvalidProfile
from gaitdiag.features import extract_features
from gaitdiag.rng import derive_seed, make_rng
from gaitdiag.signal import (
    N_CHANNELS,
    SAMPLE_RATE_HZ,
    WINDOW_SECONDS,
    FilterCoefficients,
    RawWindow,
    design_butterworth,
    frames_from_array,
    preprocess,
)

FULL_SCALE_G = 16.0
ANOMALY_KINDS = ("stumble", "drag", "freeze")
GRAVITY_CHANNELS = (2, 5)  # z1, z2


@dataclass(frozen=True)
class Band:
    cadence_hz: tuple
    amplitude_g: tuple
    pattern: tuple  # relative amplitude per channel
    harmonics: tuple
    noise_g: tuple
    shank_lag: float  # phase of IMU2 relative to IMU1, in cycles
    alternation: tuple = (0.0, 0.0)


BANDS = {
    GaitLabel.IDLE: Band((0.0, 0.0), (0.0, 0.0), (0, 0, 0, 0, 0, 0), (1.0, 0.0, 0.0), (0.008, 0.02), 0.0),
    GaitLabel.WALK: Band((1.4, 2.2), (0.25, 0.45), (1.0, 0.45, 0.7, 1.3, 0.5, 0.9),
                         (1.0, 0.35, 0.15), (0.015, 0.03), 0.15),
    GaitLabel.RUN: Band((2.4, 3.4), (0.8, 1.5), (1.0, 0.5, 1.1, 1.4, 0.6, 1.5),
                        (1.0, 0.5, 0.25), (0.03, 0.05), 0.2),
    GaitLabel.HOPPING: Band((1.8, 2.8), (0.6, 1.2), (0.45, 0.25, 1.4, 0.55, 0.3, 1.6),
                            (1.0, 0.4, 0.2), (0.02, 0.04), 0.0),
    GaitLabel.SKIP: Band((2.0, 3.0), (0.6, 1.1), (1.0, 0.45, 1.1, 1.25, 0.5, 1.3),
                         (1.0, 0.3, 0.15), (0.02, 0.04), 0.1, alternation=(0.3, 0.7)),
}

CADENCE_BANDS = {label: band.cadence_hz for label, band in BANDS.items()}


@dataclass(frozen=True)
class GaitProfile:
    scenario: Union[GaitLabel, str]
    cadence_hz: float
    amplitude_g: tuple  # per channel
    harmonic_weights: tuple = (1.0, 0.3, 0.1)
    noise_std_g: float = 0.02
    gravity_offset_g: float = 1.0
    speed_jitter: float = 0.05
    shank_lag: float = 0.0
    alternation: float = 0.0
    seed: int = 0
    events: tuple = field(default=())  # anomaly bursts: (time_s, width_s, amplitude_g)

    def validate(self):
        if self.scenario not in ANOMALY_KINDS and not isinstance(self.scenario, GaitLabel):
            raise InvalidProfile(f"unknown scenario {self.scenario!r}")
        if len(self.amplitude_g) != N_CHANNELS or len(self.harmonic_weights) != 3:
            raise InvalidProfile("need 6 channel amplitudes and 3 harmonic weights")
        if self.cadence_hz < 0 or self.noise_std_g < 0 or not 0 <= self.speed_jitter < 1:
            raise InvalidProfile("cadence, noise and jitter must be non-negative (jitter < 1)")
        if self.scenario == GaitLabel.IDLE and self.cadence_hz != 0:
            raise InvalidProfile("idle profiles have zero cadence")
        peak = sum(abs(w) for w in self.harmonic_weights) * max(abs(a) for a in self.amplitude_g)
        peak *= 1 + self.alternation
        peak += abs(self.gravity_offset_g) + max((abs(e[2]) for e in self.events), default=0.0)
        if peak + 6 * self.noise_std_g > FULL_SCALE_G:
            raise InvalidProfile(f"profile can exceed the +/-{FULL_SCALE_G} g sensor range")


def generate_array(profile: GaitProfile, duration_s: float, sample_rate_hz: float = SAMPLE_RATE_HZ) -> np.ndarray:
    """(6, N) acceleration array in g for ``duration_s`` seconds."""
    if not duration_s > 0:
        raise InvalidProfile("duration must be positive")
    profile.validate()
    n = int(round(duration_s * sample_rate_hz))
    rng = make_rng(profile.seed)
    t = np.arange(n) / sample_rate_hz

    jitter_period = rng.uniform(2.0, 5.0)
    jitter_phase = rng.uniform(0, 2 * np.pi)
    inst_freq = profile.cadence_hz * (1 + profile.speed_jitter * np.sin(2 * np.pi * t / jitter_period + jitter_phase))
    phase = 2 * np.pi * np.cumsum(inst_freq) / sample_rate_hz + rng.uniform(0, 2 * np.pi)
    channel_phase = rng.uniform(-0.3, 0.3, size=N_CHANNELS)

    out = np.zeros((N_CHANNELS, n))
    if profile.cadence_hz > 0:
        for c in range(N_CHANNELS):
            lag = 2 * np.pi * (profile.shank_lag if c >= 3 else 0.0) + channel_phase[c]
            wave = sum(
                w * np.sin(h * (phase - lag) + 0.5 * (h - 1))
                for h, w in enumerate(profile.harmonic_weights, start=1)
            )
            if profile.alternation:
                wave = wave * (1 + profile.alternation * np.cos(0.5 * (phase - lag)))
            out[c] = profile.amplitude_g[c] * wave

    for time_s, width_s, amp in profile.events:
        envelope = np.exp(-0.5 * ((t - time_s) / width_s) ** 2)
        signs = rng.choice([-1.0, 1.0], size=N_CHANNELS)
        weights = rng.uniform(0.6, 1.0, size=N_CHANNELS)
        out += (signs * weights * amp)[:, None] * envelope * np.sin(2 * np.pi * 1.8 * (t - time_s))[None, :]

    out += rng.standard_normal((N_CHANNELS, n)) * profile.noise_std_g
    for c in GRAVITY_CHANNELS:
        out[c] += profile.gravity_offset_g
    return np.clip(out, -FULL_SCALE_G, FULL_SCALE_G)


def generate(profile: GaitProfile, duration_s: float, sample_rate_hz: float = SAMPLE_RATE_HZ) -> list:
    """SampleFrames at ``sample_rate_hz``; same profile and seed give the same frames."""
    return list(frames_from_array(generate_array(profile, duration_s, sample_rate_hz), sample_rate_hz))


def draw_profile(scenario, rng: np.random.Generator, seed: Optional[int] = None) -> GaitProfile:
    """Random profile inside the scenario's bands (varying speed and intensity)."""
    seed = int(rng.integers(0, 2**63)) if seed is None else seed
    if scenario in ANOMALY_KINDS:
        return _draw_anomaly(scenario, rng, seed)
    try:
        label = GaitLabel(scenario)
    except ValueError:
        raise InvalidProfile(f"unknown scenario {scenario!r}") from None
    band = BANDS[label]
    cadence = rng.uniform(*band.cadence_hz)
    amp = rng.uniform(*band.amplitude_g)
    per_channel = tuple(float(amp * p * rng.uniform(0.85, 1.15)) for p in band.pattern)
    harm = tuple(float(w * rng.uniform(0.8, 1.2)) if i else float(w) for i, w in enumerate(band.harmonics))
    return GaitProfile(
        scenario=label,
        cadence_hz=float(cadence),
        amplitude_g=per_channel,
        harmonic_weights=harm,
        noise_std_g=float(rng.uniform(*band.noise_g)),
        gravity_offset_g=float(rng.uniform(0.9, 1.05)),
        speed_jitter=float(rng.uniform(0.0, 0.06)) if cadence else 0.0,
        shank_lag=band.shank_lag,
        alternation=float(rng.uniform(*band.alternation)),
        seed=seed,
    )


def _draw_anomaly(kind: str, rng: np.random.Generator, seed: int) -> GaitProfile:
    if kind == "stumble":
        base = draw_profile(GaitLabel.WALK, rng, seed)
        n_events = int(rng.integers(2, 4))
        events = tuple(
            (float(rng.uniform(0.5, 2.5)), float(rng.uniform(0.2, 0.35)), float(rng.uniform(4.0, 6.0)))
            for _ in range(n_events)
        )
        return replace(base, scenario="stumble", events=events)
    if kind == "drag":
        amp = rng.uniform(2.5, 3.5)
        pattern = (1.2, 1.0, 0.25, 1.5, 1.2, 0.3)
        return GaitProfile(
            scenario="drag",
            cadence_hz=float(rng.uniform(0.8, 1.1)),
            amplitude_g=tuple(float(amp * p) for p in pattern),
            harmonic_weights=(1.0, float(rng.uniform(0.6, 0.9)), 0.2),
            noise_std_g=float(rng.uniform(0.02, 0.04)),
            gravity_offset_g=float(rng.uniform(0.9, 1.05)),
            speed_jitter=float(rng.uniform(0.0, 0.1)),
            shank_lag=0.3,
            seed=seed,
        )
    if kind == "freeze":
        amp = rng.uniform(2.5, 3.5)
        pattern = (0.9, 0.6, 1.2, 1.0, 0.7, 1.4)
        events = tuple(
            (float(rng.uniform(0.3, 2.7)), float(rng.uniform(0.2, 0.4)), float(rng.uniform(2.0, 3.0)))
            for _ in range(2)
        )
        return GaitProfile(
            scenario="freeze",
            cadence_hz=float(rng.uniform(1.6, 2.2)),
            amplitude_g=tuple(float(amp * p) for p in pattern),
            harmonic_weights=(1.0, 0.2, 0.1),
            noise_std_g=float(rng.uniform(0.03, 0.06)),
            gravity_offset_g=float(rng.uniform(0.9, 1.05)),
            speed_jitter=float(rng.uniform(0.1, 0.2)),
            alternation=float(rng.uniform(0.6, 0.9)),
            seed=seed,
            events=events,
        )
    raise InvalidProfile(f"unknown anomaly kind {kind!r}")


@dataclass
class SynthWindow:
    label: Union[GaitLabel, str]
    profile: GaitProfile
    samples: np.ndarray  # (6, 177) raw, in g


def synth_windows(per_class: int, seed: int, scenarios=tuple(GaitLabel),
                  window_seconds: float = WINDOW_SECONDS, sample_rate_hz: float = SAMPLE_RATE_HZ) -> Iterator[SynthWindow]:
    """``per_class`` raw windows for every scenario, grouped by scenario."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    for scenario in scenarios:
        name = scenario.title if isinstance(scenario, GaitLabel) else scenario
        rng = make_rng(derive_seed(seed, "synth", name))
        for _ in range(per_class):
            profile = draw_profile(scenario, rng)
            yield SynthWindow(scenario, profile, generate_array(profile, window_seconds, sample_rate_hz))


def featurize(samples: np.ndarray, coeffs: Optional[FilterCoefficients] = None,
              sample_rate_hz: float = SAMPLE_RATE_HZ) -> np.ndarray:
    coeffs = coeffs or design_butterworth(sample_rate_hz=sample_rate_hz)
    n = samples.shape[1]
    return extract_features(preprocess(RawWindow(samples, sample_rate_hz, n / sample_rate_hz), coeffs))


def generate_dataset(per_class: int, seed: int, coeffs: Optional[FilterCoefficients] = None) -> LabeledDataset:
    """Class-balanced labeled feature vectors, run through the full signal chain."""
    coeffs = coeffs or design_butterworth()
    rows, labels = [], []
    for w in synth_windows(per_class, seed):
        rows.append(featurize(w.samples, coeffs))
        labels.append(int(w.label))
    return LabeledDataset(np.array(rows), np.array(labels))


def generate_anomalous(per_kind: int, seed: int, coeffs: Optional[FilterCoefficients] = None):
    """Feature vectors for the anomalous profiles; returns ``(features, kinds)``."""
    coeffs = coeffs or design_butterworth()
    rows, kinds = [], []
    for w in synth_windows(per_kind, seed, scenarios=ANOMALY_KINDS):
        rows.append(featurize(w.samples, coeffs))
        kinds.append(w.label)
    return np.array(rows), kinds


def stream(scenario, duration_s: float, seed: int) -> list:
    """One continuous labeled recording as SampleFrames."""
    profile = draw_profile(scenario, make_rng(derive_seed(seed, "stream", str(scenario))))
    return generate(profile, duration_s)


def dominant_bin(cadence_hz: float, fft_length: int = 64, sample_rate_hz: float = SAMPLE_RATE_HZ) -> int:
    return int(math.floor(cadence_hz * fft_length / sample_rate_hz + 0.5))
