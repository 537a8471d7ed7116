"""Pure-Python/numpy kernels, bit-compatible with the compiled ``_kernels``."""

import numpy as np

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1


def sos_filter(x, sos):
    """Causal direct-form-II-transposed biquad cascade, zero initial state per row."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(x)
    sections = [tuple(float(c) for c in row) for row in sos]
    for ch in range(x.shape[0]):
        z1 = [0.0] * len(sections)
        z2 = [0.0] * len(sections)
        row = x[ch].tolist()
        res = [0.0] * len(row)
        for i, v in enumerate(row):
            for s, (b0, b1, b2, a1, a2) in enumerate(sections):
                y = b0 * v + z1[s]
                z1[s] = (b1 * v - a1 * y) + z2[s]
                z2[s] = b2 * v - a2 * y
                v = y
            res[i] = v
        out[ch] = res
    return out


def round_shift(v, shift):
    """Round-half-away-from-zero arithmetic right shift of an int64 array."""
    v = np.asarray(v, dtype=np.int64)
    half = np.int64(1) << np.int64(shift - 1)
    mag = (np.abs(v) + half) >> np.int64(shift)
    return np.where(v >= 0, mag, -mag)


def dense_int8(q_in, zp_in, w, bias, multiplier, shift, zp_out):
    """Integer dense layer; returns ``(int8 outputs, -1)`` or ``(None, overflowing index)``."""
    centered = q_in.astype(np.int64) - np.int64(zp_in)
    acc = centered @ w.astype(np.int64) + bias.astype(np.int64)
    bad = np.flatnonzero((acc < INT32_MIN) | (acc > INT32_MAX))
    if bad.size:
        return None, int(bad[0])
    r = np.int64(zp_out) + round_shift(acc * np.int64(multiplier), shift)
    return np.clip(r, -128, 127).astype(np.int8), -1


def nearest_dist2(points, centroids):
    dx = points[:, None, 0] - centroids[:, :, 0]
    dy = points[:, None, 1] - centroids[:, :, 1]
    return (dx * dx + dy * dy).min(axis=1)


def assign(points, centroids):
    dx = points[:, None, 0] - centroids[None, :, 0]
    dy = points[:, None, 1] - centroids[None, :, 1]
    d = dx * dx + dy * dy
    labels = d.argmin(axis=1)
    return labels.astype(np.int64), d[np.arange(len(points)), labels]


def round_half_away(v):
    a = np.abs(v)
    f = np.floor(a)
    f += (a - f) >= 0.5
    return np.copysign(f, v)


def quantize_input(x, scale, zp):
    r = round_half_away(np.asarray(x, dtype=np.float64) / scale)
    r += zp
    return np.minimum(np.maximum(r, -128.0), 127.0).astype(np.int8)


class Int8Mlp:
    """Quantized MLP with pre-converted parameters (see ``_kernels.Int8Mlp``).

    Accumulation runs as a float64 matmul with the input zero point folded
    into the bias. Every partial sum is an integer well below 2**53, so the
    result is exact and matches the int64 path bit for bit.
    """

    def __init__(self, in_scale, in_zp, layers):
        self.in_scale = float(in_scale)
        self.in_zp = int(in_zp)
        self.layers = []
        for w, b, zp_in, multiplier, shift, zp_out, relu in layers:
            w = np.asarray(w, dtype=np.float64)
            folded = np.asarray(b, dtype=np.float64) - zp_in * w.sum(axis=0)
            half = 1 << (shift - 1)
            self.layers.append((w, folded, np.int64(multiplier), np.int64(shift), np.int64(half),
                                zp_out if relu else -128, zp_out))

    def run(self, x):
        q = quantize_input(x, self.in_scale, self.in_zp).astype(np.float64)
        for index, (w, bias, mult, shift, half, lo, zp_out) in enumerate(self.layers):
            acc = q @ w
            acc += bias
            if np.abs(acc + 0.5).max() >= 2147483648.0:
                return None, index
            p = acc.astype(np.int64)
            p *= mult
            # half-away rounding: (p + half - [p < 0]) >> shift
            r = (p + half - (p < 0)) >> shift
            r += zp_out
            q = np.minimum(np.maximum(r, lo), 127).astype(np.float64)
        return q.astype(np.int8), -1


def pair_distances(features, indices, mean, std, pairs, centroids):
    z = (features[indices] - mean) / std
    pts = z[pairs]
    dx = pts[:, None, 0] - centroids[:, :, 0]
    dy = pts[:, None, 1] - centroids[:, :, 1]
    return np.sqrt((dx * dx + dy * dy).min(axis=1))
