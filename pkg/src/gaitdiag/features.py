"""The 222-value feature vector.

Layout (stable across versions, see ``FEATURE_NAMES``)::

    [0, 18)    per channel: rms, skewness, kurtosis            -> 6 x 3
    [18, 30)   per channel: spectral skewness, spectral kurtosis -> 6 x 2
    [30, 222)  per channel: power of one-sided bins 1..32      -> 6 x 32

Channels run in ``(x1, y1, z1, x2, y2, z2)`` order inside each group.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from gaitdiag.errors import BinOutOfRange, ChannelTooShort, EmptyChannel
from gaitdiag.signal import CHANNELS, N_CHANNELS, SAMPLE_RATE_HZ, CenteredWindow

FFT_LENGTH = 64
N_BINS = FFT_LENGTH // 2
TIME_FEATURES = ("rms", "skew", "kurt")
SPECTRAL_MOMENTS = ("spec_skew", "spec_kurt")
N_TIME = N_CHANNELS * len(TIME_FEATURES)
N_MOMENTS = N_CHANNELS * len(SPECTRAL_MOMENTS)
N_POWER = N_CHANNELS * N_BINS
N_FEATURES = N_TIME + N_MOMENTS + N_POWER
POWER_OFFSET = N_TIME + N_MOMENTS
LAYOUT_VERSION = "gaitdiag-features-1"

# variances below this are treated as zero
ZERO_VARIANCE = 1e-24

FEATURE_NAMES = tuple(
    [f"{ch}_{f}" for ch in CHANNELS for f in TIME_FEATURES]
    + [f"{ch}_{f}" for ch in CHANNELS for f in SPECTRAL_MOMENTS]
    + [f"{ch}_p{b:02d}" for ch in CHANNELS for b in range(1, N_BINS + 1)]
)
assert len(FEATURE_NAMES) == N_FEATURES == 222


def power_index(channel: int, bin_: int) -> int:
    """Position of one spectral-power feature in the vector."""
    if not 1 <= bin_ <= N_BINS:
        raise BinOutOfRange(f"bin {bin_} outside 1..{N_BINS}")
    return POWER_OFFSET + channel * N_BINS + bin_ - 1


@dataclass(frozen=True)
class Spectrum:
    """Welch-averaged power of one channel.

    ``power[K]`` is the frame-averaged ``|A(K)|^2`` for K = 0..fft_length-1;
    ``last_frame`` keeps the complex coefficients of the final frame.
    """

    power: np.ndarray
    last_frame: np.ndarray
    n_frames: int
    fft_length: int = FFT_LENGTH
    sample_rate_hz: float = SAMPLE_RATE_HZ


def _as_channel(channel) -> np.ndarray:
    x = np.asarray(channel, dtype=np.float64)
    if x.shape[-1] == 0:
        raise EmptyChannel("channel has no samples")
    return x


def rms(channel) -> float:
    x = _as_channel(channel)
    return float(np.sqrt(np.mean(x * x, axis=-1)))


def _standardized(x: np.ndarray, power: int) -> np.ndarray:
    d = x - x.mean(axis=-1, keepdims=True)
    m2 = np.mean(d * d, axis=-1)
    mk = np.mean(d**power, axis=-1)
    safe = np.where(m2 < ZERO_VARIANCE, 1.0, m2)
    return np.where(m2 < ZERO_VARIANCE, 0.0, mk / safe ** (power / 2))


def skewness(channel) -> float:
    """Population skewness; 0 for (near-)constant input."""
    return float(_standardized(_as_channel(channel), 3))


def kurtosis_excess(channel) -> float:
    """Population kurtosis minus 3; 0 for (near-)constant input."""
    x = _as_channel(channel)
    d = x - x.mean()
    m2 = np.mean(d * d)
    if m2 < ZERO_VARIANCE:
        return 0.0
    return float(np.mean(d**4) / (m2 * m2) - 3.0)


def frame_offsets(n: int, fft_length: int = FFT_LENGTH) -> list[int]:
    """Start offsets of 50%-overlapping frames that fit inside ``n`` samples."""
    hop = fft_length // 2
    return list(range(0, n - fft_length + 1, hop))


def _check_fft_length(n: int, fft_length: int):
    if fft_length < 2 or fft_length & (fft_length - 1):
        raise ValueError(f"fft_length must be a power of two, got {fft_length}")
    if n < fft_length:
        raise ChannelTooShort(f"channel of {n} samples is shorter than fft_length {fft_length}")


def _welch(x: np.ndarray, fft_length: int):
    offsets = frame_offsets(x.shape[-1], fft_length)
    frames = np.stack([x[..., o : o + fft_length] for o in offsets], axis=-2)
    coeffs = np.fft.fft(frames, axis=-1)
    power = (coeffs.real**2 + coeffs.imag**2).mean(axis=-2)
    return power, coeffs[..., -1, :], len(offsets)


def fft(channel, fft_length: int = FFT_LENGTH, sample_rate_hz: float = SAMPLE_RATE_HZ) -> Spectrum:
    """Rectangular-taper Welch average of length-``fft_length`` DFT frames."""
    x = _as_channel(channel)
    _check_fft_length(x.shape[-1], fft_length)
    power, last, n_frames = _welch(x, fft_length)
    return Spectrum(power, last, n_frames, fft_length, sample_rate_hz)


def spectral_power(spectrum: Spectrum, bin_: int) -> float:
    """|A(K)|^2 / (N_L * f) for a one-sided, non-DC bin."""
    if not 1 <= bin_ <= spectrum.fft_length // 2:
        raise BinOutOfRange(f"bin {bin_} outside 1..{spectrum.fft_length // 2}")
    return float(spectrum.power[bin_] / (spectrum.fft_length * spectrum.sample_rate_hz))


def _magnitude_moment_ratio(power: np.ndarray, order: int) -> np.ndarray:
    # moments of |A| over bins 1..N/2, taken about zero rather than the mean
    mag = np.sqrt(power)
    m2 = np.mean(power, axis=-1)
    mk = np.mean(mag**order, axis=-1)
    safe = np.where(m2 < ZERO_VARIANCE, 1.0, m2)
    return np.where(m2 < ZERO_VARIANCE, 0.0, mk / safe ** (order / 2))


def _one_sided(spectrum: Spectrum) -> np.ndarray:
    return spectrum.power[..., 1 : spectrum.fft_length // 2 + 1]


def spectral_skewness(spectrum: Spectrum) -> float:
    return float(_magnitude_moment_ratio(_one_sided(spectrum), 3))


def spectral_kurtosis(spectrum: Spectrum) -> float:
    ratio = _magnitude_moment_ratio(_one_sided(spectrum), 4)
    return float(np.where(ratio == 0.0, 0.0, ratio - 3.0))


def extract_features(window: CenteredWindow, fft_length: int = FFT_LENGTH) -> np.ndarray:
    """Compute the 222-vector for a centered, filtered 6-channel window.

    Every channel goes through the same vectorized code as the single-channel
    functions above, so the two agree to rounding.
    """
    x = np.asarray(window.samples, dtype=np.float64)
    if x.shape[0] != N_CHANNELS or x.shape[1] == 0:
        raise EmptyChannel(f"window must be {N_CHANNELS} x N with N >= 1, got {x.shape}")
    _check_fft_length(x.shape[1], fft_length)
    if fft_length // 2 != N_BINS:
        raise ValueError(f"the 222-value layout needs fft_length {FFT_LENGTH}")

    d = x - x.mean(axis=1, keepdims=True)
    m2 = np.mean(d * d, axis=1)
    flat = m2 < ZERO_VARIANCE
    safe = np.where(flat, 1.0, m2)
    time = np.empty((N_CHANNELS, 3))
    time[:, 0] = np.sqrt(np.mean(x * x, axis=1))
    time[:, 1] = np.where(flat, 0.0, np.mean(d**3, axis=1) / safe**1.5)
    time[:, 2] = np.where(flat, 0.0, np.mean(d**4, axis=1) / (safe * safe) - 3.0)

    power, _, _ = _welch(x, fft_length)
    one_sided = power[:, 1 : N_BINS + 1]
    moments = np.empty((N_CHANNELS, 2))
    moments[:, 0] = _magnitude_moment_ratio(one_sided, 3)
    kurt = _magnitude_moment_ratio(one_sided, 4)
    moments[:, 1] = np.where(kurt == 0.0, 0.0, kurt - 3.0)

    scaled = one_sided / (fft_length * window.sample_rate_hz)
    vec = np.concatenate([time.ravel(), moments.ravel(), scaled.ravel()])
    assert vec.shape == (N_FEATURES,)
    return vec


# --- serialization ----------------------------------------------------------


def to_json(vec) -> str:
    return json.dumps([float(v) for v in vec])


def from_json(text: str) -> np.ndarray:
    vec = np.array(json.loads(text), dtype=np.float64)
    if vec.shape != (N_FEATURES,):
        raise ValueError(f"expected {N_FEATURES} values, got {vec.shape}")
    return vec


def to_csv_row(vec) -> str:
    return ",".join(repr(float(v)) for v in vec)


def from_csv_row(line: str) -> np.ndarray:
    vec = np.array([float(c) for c in line.strip().split(",")], dtype=np.float64)
    if vec.shape != (N_FEATURES,):
        raise ValueError(f"expected {N_FEATURES} values, got {vec.shape}")
    return vec


def csv_header() -> str:
    return ",".join(FEATURE_NAMES)
