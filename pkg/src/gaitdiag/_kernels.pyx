# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Every routine mirrors ``_fallback`` operation for operation."""

import numpy as np
cimport numpy as cnp

from libc.math cimport INFINITY, copysign, fabs, floor, sqrt
from libc.stdint cimport int8_t, int32_t, int64_t

cnp.import_array()

INT32_MIN = -2147483648
INT32_MAX = 2147483647


def sos_filter(const double[:, ::1] x, const double[:, ::1] sos):
    cdef Py_ssize_t n_ch = x.shape[0], n = x.shape[1], n_sec = sos.shape[0]
    cdef Py_ssize_t c, i, s
    cdef double v, y, b0, b1, b2, a1, a2
    out = np.empty((n_ch, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[:] z1 = np.zeros(n_sec)
    cdef double[:] z2 = np.zeros(n_sec)
    for c in range(n_ch):
        for s in range(n_sec):
            z1[s] = 0.0
            z2[s] = 0.0
        for i in range(n):
            v = x[c, i]
            for s in range(n_sec):
                b0 = sos[s, 0]
                b1 = sos[s, 1]
                b2 = sos[s, 2]
                a1 = sos[s, 3]
                a2 = sos[s, 4]
                y = b0 * v + z1[s]
                z1[s] = (b1 * v - a1 * y) + z2[s]
                z2[s] = b2 * v - a2 * y
                v = y
            o[c, i] = v
    return out


cdef inline int64_t _round_shift(int64_t v, int shift) nogil:
    cdef int64_t half = (<int64_t>1) << (shift - 1)
    if v >= 0:
        return (v + half) >> shift
    return -((-v + half) >> shift)


def dense_int8(const int8_t[::1] q_in, int zp_in, const int8_t[:, ::1] w,
               const int32_t[::1] bias, long multiplier, int shift, int zp_out):
    cdef Py_ssize_t n_in = w.shape[0], n_out = w.shape[1], i, j
    cdef int64_t acc, r
    cdef int64_t[::1] accs = np.empty(n_out, dtype=np.int64)
    out = np.empty(n_out, dtype=np.int8)
    cdef int8_t[::1] o = out
    for j in range(n_out):
        accs[j] = bias[j]
    for i in range(n_in):
        acc = <int64_t>q_in[i] - zp_in
        if acc == 0:
            continue
        for j in range(n_out):
            accs[j] += acc * w[i, j]
    for j in range(n_out):
        acc = accs[j]
        if acc < INT32_MIN or acc > INT32_MAX:
            return None, j
        r = zp_out + _round_shift(acc * multiplier, shift)
        if r < -128:
            r = -128
        elif r > 127:
            r = 127
        o[j] = <int8_t>r
    return out, -1


def nearest_dist2(const double[:, ::1] points, const double[:, :, ::1] centroids):
    cdef Py_ssize_t n_pair = centroids.shape[0], k = centroids.shape[1], p, j
    cdef double best, dx, dy, d
    out = np.empty(n_pair, dtype=np.float64)
    cdef double[::1] o = out
    for p in range(n_pair):
        best = INFINITY
        for j in range(k):
            dx = points[p, 0] - centroids[p, j, 0]
            dy = points[p, 1] - centroids[p, j, 1]
            d = dx * dx + dy * dy
            if d < best:
                best = d
        o[p] = best
    return out


def assign(const double[:, ::1] points, const double[:, ::1] centroids):
    cdef Py_ssize_t n = points.shape[0], k = centroids.shape[0], i, j, arg
    cdef double best, dx, dy, d
    labels = np.empty(n, dtype=np.int64)
    dist2 = np.empty(n, dtype=np.float64)
    cdef int64_t[::1] lab = labels
    cdef double[::1] dd = dist2
    for i in range(n):
        best = INFINITY
        arg = 0
        for j in range(k):
            dx = points[i, 0] - centroids[j, 0]
            dy = points[i, 1] - centroids[j, 1]
            d = dx * dx + dy * dy
            if d < best:
                best = d
                arg = j
        lab[i] = arg
        dd[i] = best
    return labels, dist2


cdef inline double _round_half_away(double v) nogil:
    cdef double a = fabs(v)
    cdef double f = floor(a)
    if a - f >= 0.5:
        f += 1.0
    return copysign(f, v)


def quantize_input(const double[::1] x, double scale, int zp):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double r
    out = np.empty(n, dtype=np.int8)
    cdef int8_t[::1] o = out
    for i in range(n):
        r = _round_half_away(x[i] / scale) + zp
        if r < -128:
            r = -128
        elif r > 127:
            r = 127
        o[i] = <int8_t>r
    return out


cdef enum:
    MAX_LAYERS = 8


cdef class Int8Mlp:
    """Quantized MLP with its parameters pinned, so a call costs no buffer set-up."""

    cdef int n_layers, width, in_zp
    cdef double in_scale
    cdef int8_t* w[MAX_LAYERS]
    cdef int32_t* b[MAX_LAYERS]
    cdef int n_in[MAX_LAYERS]
    cdef int n_out[MAX_LAYERS]
    cdef int zp_in[MAX_LAYERS]
    cdef int zp_out[MAX_LAYERS]
    cdef int shift[MAX_LAYERS]
    cdef int relu[MAX_LAYERS]
    cdef int64_t mult[MAX_LAYERS]
    cdef object keep
    cdef int8_t[::1] buf_a
    cdef int8_t[::1] buf_b
    cdef int64_t[::1] acc

    def __init__(self, double in_scale, int in_zp, list layers):
        cdef cnp.ndarray w, b
        if not 0 < len(layers) <= MAX_LAYERS:
            raise ValueError("between 1 and 8 layers supported")
        self.in_scale = in_scale
        self.in_zp = in_zp
        self.n_layers = len(layers)
        self.keep = []
        width = 0
        for i, (wo, bo, zp_in, multiplier, shift, zp_out, relu) in enumerate(layers):
            w = np.ascontiguousarray(wo, dtype=np.int8)
            b = np.ascontiguousarray(bo, dtype=np.int32)
            self.keep.append((w, b))
            self.w[i] = <int8_t*>cnp.PyArray_DATA(w)
            self.b[i] = <int32_t*>cnp.PyArray_DATA(b)
            self.n_in[i] = w.shape[0]
            self.n_out[i] = w.shape[1]
            if i and self.n_in[i] != self.n_out[i - 1]:
                raise ValueError("layer widths do not chain")
            self.zp_in[i] = zp_in
            self.zp_out[i] = zp_out
            self.mult[i] = multiplier
            self.shift[i] = shift
            self.relu[i] = 1 if relu else 0
            width = max(width, w.shape[0], w.shape[1])
        self.width = width
        self.buf_a = np.empty(width, dtype=np.int8)
        self.buf_b = np.empty(width, dtype=np.int8)
        self.acc = np.empty(width, dtype=np.int64)

    def run(self, const double[::1] x):
        """Quantize ``x`` and run every layer: ``(int8 outputs, -1)`` or ``(None, failing layer)``."""
        cdef Py_ssize_t i, j, l
        cdef int8_t* src
        cdef int8_t* dst
        cdef int8_t* tmp
        cdef int8_t* w
        cdef int64_t a, r
        cdef double v
        if x.shape[0] != self.n_in[0]:
            raise ValueError("input width mismatch")
        src = &self.buf_a[0]
        dst = &self.buf_b[0]
        for i in range(self.n_in[0]):
            v = _round_half_away(x[i] / self.in_scale) + self.in_zp
            if v < -128:
                v = -128
            elif v > 127:
                v = 127
            src[i] = <int8_t>v
        for l in range(self.n_layers):
            w = self.w[l]
            for j in range(self.n_out[l]):
                self.acc[j] = self.b[l][j]
            for i in range(self.n_in[l]):
                a = <int64_t>src[i] - self.zp_in[l]
                if a == 0:
                    continue
                for j in range(self.n_out[l]):
                    self.acc[j] += a * w[i * self.n_out[l] + j]
            for j in range(self.n_out[l]):
                a = self.acc[j]
                if a < INT32_MIN or a > INT32_MAX:
                    return None, l
                r = self.zp_out[l] + _round_shift(a * self.mult[l], self.shift[l])
                if r < -128:
                    r = -128
                elif r > 127:
                    r = 127
                if self.relu[l] and r < self.zp_out[l]:
                    r = self.zp_out[l]
                dst[j] = <int8_t>r
            tmp = src
            src = dst
            dst = tmp
        out = np.empty(self.n_out[self.n_layers - 1], dtype=np.int8)
        cdef int8_t[::1] o = out
        for j in range(o.shape[0]):
            o[j] = src[j]
        return out, -1


def pair_distances(const double[::1] features, const int64_t[::1] indices,
                   const double[::1] mean, const double[::1] std,
                   const int64_t[:, ::1] pairs, const double[:, :, ::1] centroids):
    cdef Py_ssize_t n_sel = indices.shape[0], n_pair = pairs.shape[0], k = centroids.shape[1]
    cdef Py_ssize_t i, p, j
    cdef double z[16]
    cdef double px, py, dx, dy, d, best
    if n_sel > 16:
        raise ValueError("at most 16 selected features")
    out = np.empty(n_pair, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n_sel):
        z[i] = (features[indices[i]] - mean[i]) / std[i]
    for p in range(n_pair):
        px = z[pairs[p, 0]]
        py = z[pairs[p, 1]]
        best = INFINITY
        for j in range(k):
            dx = px - centroids[p, j, 0]
            dy = py - centroids[p, j, 1]
            d = dx * dx + dy * dy
            if d < best:
                best = d
        o[p] = sqrt(best)
    return out
