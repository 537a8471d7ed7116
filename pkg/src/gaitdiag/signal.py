"""Window assembly, zero-g centering and Butterworth low-pass filtering.

Channels are always ordered ``(x1, y1, z1, x2, y2, z2)``: thigh IMU first,
shank IMU second, accelerations in g.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

from gaitdiag import kernels
from gaitdiag.errors import (
    InsufficientSamples,
    InvalidCutoff,
    NonFiniteSample,
    OddOrder,
    StreamFormatError,
)

CHANNELS = ("x1", "y1", "z1", "x2", "y2", "z2")
N_CHANNELS = len(CHANNELS)
SAMPLE_RATE_HZ = 59
WINDOW_SECONDS = 3
FILTER_ORDER = 6
CUTOFF_HZ = 3.0


@dataclass(frozen=True)
class SampleFrame:
    ax1: float
    ay1: float
    az1: float
    ax2: float
    ay2: float
    az2: float
    timestamp_us: Optional[int] = None

    @classmethod
    def from_values(cls, values, timestamp_us=None) -> "SampleFrame":
        if len(values) != N_CHANNELS:
            raise StreamFormatError(f"expected {N_CHANNELS} channels, got {len(values)}")
        return cls(*(float(v) for v in values), timestamp_us=timestamp_us)

    @property
    def values(self) -> tuple:
        return (self.ax1, self.ay1, self.az1, self.ax2, self.ay2, self.az2)


@dataclass(frozen=True)
class RawWindow:
    samples: np.ndarray  # (6, N)
    sample_rate_hz: float = SAMPLE_RATE_HZ
    window_seconds: float = WINDOW_SECONDS

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] != N_CHANNELS:
            raise ValueError(f"window must be {N_CHANNELS} x N, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise NonFiniteSample("window contains NaN or Inf")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def n_points(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class CenteredWindow:
    samples: np.ndarray  # (6, N), each row zero-mean
    stored_means: np.ndarray  # (6,)
    sample_rate_hz: float = SAMPLE_RATE_HZ
    filtered: bool = field(default=False)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)


@dataclass(frozen=True)
class FilterCoefficients:
    """Biquad cascade; each row of ``sections`` is ``(b0, b1, b2, a1, a2)`` with a0 = 1."""

    sections: np.ndarray
    order: int
    cutoff_hz: float
    sample_rate_hz: float

    def response(self, freqs_hz) -> np.ndarray:
        """Complex frequency response H(e^{jw}) at the given frequencies."""
        w = 2.0 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / self.sample_rate_hz
        z1 = np.exp(-1j * w)
        z2 = z1 * z1
        h = np.ones_like(z1)
        for b0, b1, b2, a1, a2 in self.sections:
            h = h * (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2)
        return h

    def gain_db(self, freqs_hz) -> np.ndarray:
        return 20.0 * np.log10(np.abs(self.response(freqs_hz)))

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots([1.0, a1, a2]) for _, _, _, a1, a2 in self.sections])


def window_length(window_seconds: float, sample_rate_hz: float) -> int:
    """Points per channel in one window (w * f)."""
    n = window_seconds * sample_rate_hz
    if n < 1 or abs(n - round(n)) > 1e-9:
        raise ValueError(f"window of {window_seconds} s at {sample_rate_hz} Hz is not a whole number of samples")
    return int(round(n))


def total_points(window_seconds: float, n_channels: int, sample_rate_hz: float) -> int:
    """N_T = w * c * f."""
    return window_length(window_seconds, sample_rate_hz) * n_channels


def assemble_window(
    stream: Iterator[SampleFrame],
    window_seconds: float = WINDOW_SECONDS,
    sample_rate_hz: float = SAMPLE_RATE_HZ,
) -> RawWindow:
    """Pull exactly ``w * f`` frames from ``stream``; anything after stays in the iterator."""
    n = window_length(window_seconds, sample_rate_hz)
    buf = np.empty((n, N_CHANNELS), dtype=np.float64)
    taken = 0
    for frame in itertools.islice(stream, n):
        values = frame.values if isinstance(frame, SampleFrame) else tuple(frame)
        if len(values) != N_CHANNELS:
            raise StreamFormatError(f"frame {taken} has {len(values)} channels")
        if not all(math.isfinite(v) for v in values):
            raise NonFiniteSample(f"non-finite value in frame {taken}: {values}")
        buf[taken] = values
        taken += 1
    if taken < n:
        raise InsufficientSamples(f"stream ended after {taken} of {n} frames")
    return RawWindow(buf.T.copy(), sample_rate_hz=sample_rate_hz, window_seconds=window_seconds)


def iter_windows(
    stream: Iterable[SampleFrame],
    window_seconds: float = WINDOW_SECONDS,
    sample_rate_hz: float = SAMPLE_RATE_HZ,
    hop: Optional[int] = None,
) -> Iterator[RawWindow]:
    """Yield windows until the stream runs dry. ``hop`` defaults to the window
    length (tumbling windows); a trailing partial window is dropped."""
    n = window_length(window_seconds, sample_rate_hz)
    hop = n if hop is None else int(hop)
    if not 1 <= hop <= n:
        raise ValueError(f"hop must be in [1, {n}], got {hop}")
    it = iter(stream)
    carry: list = []
    while True:
        need = n - len(carry)
        fresh = itertools.chain(carry, itertools.islice(it, need))
        try:
            window = assemble_window(fresh, window_seconds, sample_rate_hz)
        except InsufficientSamples:
            return
        yield window
        if hop < n:
            rows = window.samples.T[hop:]
            carry = [tuple(r) for r in rows]
        else:
            carry = []


def center(window: RawWindow | CenteredWindow) -> CenteredWindow:
    """Subtract each channel's mean. Already-centered windows pass through unchanged."""
    if isinstance(window, CenteredWindow):
        return window
    x = window.samples
    means = np.array([math.fsum(row) / len(row) for row in x])
    return CenteredWindow(x - means[:, None], means, window.sample_rate_hz)


def design_butterworth(
    order: int = FILTER_ORDER,
    cutoff_hz: float = CUTOFF_HZ,
    sample_rate_hz: float = SAMPLE_RATE_HZ,
) -> FilterCoefficients:
    """Digital Butterworth low-pass via the bilinear transform with pre-warping.

    The analog prototype's conjugate pole pairs map one-to-one onto biquads,
    each with unit DC gain, so the cascade has |H(0)| = 1 exactly in theory.
    """
    if not 0 < cutoff_hz < sample_rate_hz / 2:
        raise InvalidCutoff(f"cutoff {cutoff_hz} Hz must lie in (0, {sample_rate_hz / 2}) Hz")
    if order < 2 or order % 2:
        raise OddOrder(f"only even orders >= 2 are supported, got {order}")
    k = math.tan(math.pi * cutoff_hz / sample_rate_hz)
    k2 = k * k
    sections = []
    for i in range(order // 2):
        # analog section s^2 + 2 sin(theta) s + 1
        damp = 2.0 * math.sin(math.pi * (2 * i + 1) / (2 * order))
        norm = 1.0 + damp * k + k2
        b0 = k2 / norm
        sections.append((b0, 2.0 * b0, b0, 2.0 * (k2 - 1.0) / norm, (1.0 - damp * k + k2) / norm))
    sos = np.array(sections, dtype=np.float64)
    sos.setflags(write=False)
    return FilterCoefficients(sos, order, float(cutoff_hz), float(sample_rate_hz))


def filter_window(window: CenteredWindow, coeffs: FilterCoefficients) -> CenteredWindow:
    """Causal single forward pass per channel, zero initial state."""
    out = kernels.sos_filter(window.samples, coeffs.sections)
    return CenteredWindow(out, window.stored_means, window.sample_rate_hz, filtered=True)


def preprocess(window: RawWindow, coeffs: FilterCoefficients) -> CenteredWindow:
    return filter_window(center(window), coeffs)


# --- serial-forwarder line format -------------------------------------------


def parse_frames(lines: Iterable[str], sample_rate_hz: float = SAMPLE_RATE_HZ) -> Iterator[SampleFrame]:
    """Parse ``x1,y1,z1,x2,y2,z2`` lines, with an optional leading timestamp column.

    A first line that does not parse as numbers is treated as a header. Missing
    timestamps are synthesized from the sample rate.
    """
    period_us = 1e6 / sample_rate_hz
    index = 0
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cells = [c.strip() for c in line.split(",")]
        try:
            numbers = [float(c) for c in cells]
        except ValueError:
            if index == 0 and lineno == 1:
                continue
            raise StreamFormatError(f"line {lineno}: cannot parse {line!r}") from None
        if len(numbers) == N_CHANNELS + 1:
            ts = numbers[0]
            if not math.isfinite(ts):
                raise StreamFormatError(f"line {lineno}: bad timestamp")
            stamp = int(ts)
            numbers = numbers[1:]
        elif len(numbers) == N_CHANNELS:
            stamp = int(round(index * period_us))
        else:
            raise StreamFormatError(f"line {lineno}: expected 6 or 7 columns, got {len(numbers)}")
        yield SampleFrame(*numbers, timestamp_us=stamp)
        index += 1


def format_frame(frame: SampleFrame, with_timestamp: bool = False) -> str:
    cells = [repr(float(v)) for v in frame.values]
    if with_timestamp and frame.timestamp_us is not None:
        cells.insert(0, str(frame.timestamp_us))
    return ",".join(cells)


def frames_from_array(samples: np.ndarray, sample_rate_hz: float = SAMPLE_RATE_HZ, start_index: int = 0):
    """Turn a (6, N) array into SampleFrames with synthesized timestamps."""
    period_us = 1e6 / sample_rate_hz
    for i, row in enumerate(np.asarray(samples, dtype=np.float64).T.tolist()):
        yield SampleFrame(*row, timestamp_us=int(round((start_index + i) * period_us)))
