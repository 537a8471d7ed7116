"""Kernel dispatch: compiled core when importable, pure-Python fallback otherwise.

Set ``GAITDIAG_PURE_PYTHON=1`` to force the fallback.
"""

import logging
import os

import numpy as np

from gaitdiag import _fallback

logger = logging.getLogger(__name__)

try:
    if os.environ.get("GAITDIAG_PURE_PYTHON"):
        raise ImportError("pure-Python kernels requested")
    from gaitdiag import _kernels as compiled
except ImportError as exc:  # pragma: no cover - depends on build
    logger.debug("compiled kernels unavailable: %s", exc)
    compiled = None

fallback = _fallback
BACKEND = "compiled" if compiled is not None else "python"
_impl = compiled if compiled is not None else fallback


def sos_filter(x, sos):
    """Filter each row of ``x`` (channels x samples) through the biquad cascade."""
    return _impl.sos_filter(
        np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(sos, dtype=np.float64)
    )


def dense_int8(q_in, zp_in, w, bias, multiplier, shift, zp_out):
    return _impl.dense_int8(
        np.ascontiguousarray(q_in, dtype=np.int8),
        int(zp_in),
        np.ascontiguousarray(w, dtype=np.int8),
        np.ascontiguousarray(bias, dtype=np.int32),
        int(multiplier),
        int(shift),
        int(zp_out),
    )


def nearest_dist2(points, centroids):
    """Squared distance from each pair's point to its closest centroid."""
    return _impl.nearest_dist2(
        np.ascontiguousarray(points, dtype=np.float64),
        np.ascontiguousarray(centroids, dtype=np.float64),
    )


def assign(points, centroids):
    """Nearest-centroid labels (lowest index on ties) and squared distances."""
    return _impl.assign(
        np.ascontiguousarray(points, dtype=np.float64),
        np.ascontiguousarray(centroids, dtype=np.float64),
    )


def quantize_input(x, scale, zp):
    """float64 vector -> int8 with round-half-away and saturation."""
    return _impl.quantize_input(np.ascontiguousarray(x, dtype=np.float64), float(scale), int(zp))


def pack_int8_layers(layers) -> list:
    """Pre-converted layer tuples for :func:`int8_mlp` (do this once per model)."""
    return [
        (
            np.ascontiguousarray(l.weights, dtype=np.int8),
            np.ascontiguousarray(l.bias, dtype=np.int32),
            int(l.in_q.zero_point),
            int(l.multiplier),
            int(l.shift),
            int(l.out_q.zero_point),
            bool(l.relu),
        )
        for l in layers
    ]


def int8_mlp(in_scale, in_zp, packed_layers):
    """Runner whose ``run(x)`` does the whole quantized forward pass and
    returns ``(int8 logits, -1)`` or ``(None, index of the overflowing layer)``."""
    return _impl.Int8Mlp(float(in_scale), int(in_zp), packed_layers)


def pair_distances(features, indices, mean, std, pairs, centroids):
    """Nearest-centroid distance per feature pair, after z-scoring the selected features."""
    return _impl.pair_distances(
        np.ascontiguousarray(features, dtype=np.float64),
        np.ascontiguousarray(indices, dtype=np.int64),
        np.ascontiguousarray(mean, dtype=np.float64),
        np.ascontiguousarray(std, dtype=np.float64),
        np.ascontiguousarray(pairs, dtype=np.int64),
        np.ascontiguousarray(centroids, dtype=np.float64),
    )
