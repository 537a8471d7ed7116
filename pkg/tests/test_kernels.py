"""The compiled core and the pure-Python fallback must agree bit for bit."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gaitdiag import _fallback as py
from gaitdiag import kernels
from gaitdiag.anomaly import PAIRS
from gaitdiag.signal import design_butterworth

compiled = kernels.compiled
needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled kernels not built")
reals = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def same(a, b):
    if isinstance(a, tuple):
        return len(a) == len(b) and all(same(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray):
        return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
    return a == b


def int8_layers(rng, sizes, bias_span=5000):
    layers = []
    for i in range(len(sizes) - 1):
        w = rng.integers(-127, 128, (sizes[i], sizes[i + 1])).astype(np.int8)
        b = rng.integers(-bias_span, bias_span + 1, sizes[i + 1]).astype(np.int32)
        layers.append((w, b, int(rng.integers(-128, 128)), int(rng.integers(2**30, 2**31)),
                       int(rng.integers(20, 45)), int(rng.integers(-128, 128)), i < len(sizes) - 2))
    return layers


@needs_compiled
@given(x=arrays(np.float64, (3, 60), elements=reals), cutoff=st.floats(0.5, 25))
@settings(max_examples=40, deadline=None)
def test_sos_filter_bitwise(x, cutoff):
    sos = design_butterworth(6, cutoff, 59.0).sections
    assert same(compiled.sos_filter(x, sos), py.sos_filter(x, sos))


@needs_compiled
@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_dense_int8_bitwise(seed):
    rng = np.random.default_rng(seed)
    (w, b, zp_in, m0, shift, zp_out, _), = int8_layers(rng, (30, 7))
    q = rng.integers(-128, 128, 30).astype(np.int8)
    assert same(compiled.dense_int8(q, zp_in, w, b, m0, shift, zp_out),
                py.dense_int8(q, zp_in, w, b, m0, shift, zp_out))


def test_dense_int8_reports_overflow():
    w = np.full((4, 2), 127, np.int8)
    b = np.array([2**31 - 10, 0], np.int32)
    q = np.full(4, 127, np.int8)
    for impl in filter(None, (py, compiled)):
        out, bad = impl.dense_int8(q, -128, w, b, 2**30, 31, 0)
        assert out is None and bad == 0


@needs_compiled
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-3, 1.0))
@settings(max_examples=60, deadline=None)
def test_int8_mlp_bitwise(seed, scale):
    rng = np.random.default_rng(seed)
    layers = int8_layers(rng, (222, 20, 10, 5))
    x = rng.normal(scale=3.0, size=222)
    zp = int(rng.integers(-128, 128))
    assert same(compiled.Int8Mlp(scale, zp, layers).run(x), py.Int8Mlp(scale, zp, layers).run(x))


def test_int8_mlp_overflow_names_layer():
    # layer 0 saturates at 127 (zp -128), so layer 1 sees 255 per input on top of a full bias
    first = (np.full((8, 4), 127, np.int8), np.zeros(4, np.int32), 0, 2**30, 20, -128, True)
    second = (np.full((4, 3), 127, np.int8), np.full(3, 2**31 - 1, np.int32), -128, 2**30, 31, 0, False)
    for impl in filter(None, (py, compiled)):
        assert impl.Int8Mlp(0.01, 0, [first, second]).run(np.full(8, 1.0)) == (None, 1)


@needs_compiled
@given(x=arrays(np.float64, 50, elements=reals), scale=st.floats(1e-3, 10), zp=st.integers(-128, 127))
@settings(max_examples=60, deadline=None)
def test_quantize_input_bitwise(x, scale, zp):
    assert same(compiled.quantize_input(x, scale, zp), py.quantize_input(x, scale, zp))


@needs_compiled
@given(points=arrays(np.float64, (25, 2), elements=reals),
       centroids=arrays(np.float64, (6, 2), elements=reals))
@settings(max_examples=60, deadline=None)
def test_assign_bitwise(points, centroids):
    assert same(compiled.assign(points, centroids), py.assign(points, centroids))


def test_assign_breaks_ties_to_lowest_index():
    centroids = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    for impl in filter(None, (py, compiled)):
        labels, d2 = impl.assign(np.zeros((1, 2)), centroids)
        assert labels.tolist() == [0] and d2.tolist() == [1.0]


@needs_compiled
@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_pair_kernels_bitwise(seed):
    rng = np.random.default_rng(seed)
    features = rng.normal(size=222) * 10
    indices = rng.choice(222, 4, replace=False).astype(np.int64)
    mean, std = rng.normal(size=4), rng.uniform(0.1, 3, 4)
    pairs = np.array(PAIRS, dtype=np.int64)
    centroids = rng.normal(size=(6, 9, 2))
    assert same(compiled.pair_distances(features, indices, mean, std, pairs, centroids),
                py.pair_distances(features, indices, mean, std, pairs, centroids))
    pts = rng.normal(size=(6, 2))
    assert same(compiled.nearest_dist2(pts, centroids), py.nearest_dist2(pts, centroids))


def _backend_in_subprocess(env_extra):
    env = {**os.environ, **env_extra}
    out = subprocess.run([sys.executable, "-c", "import gaitdiag; print(gaitdiag.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    return out.stdout.strip()


def test_pure_python_switch():
    assert _backend_in_subprocess({"GAITDIAG_PURE_PYTHON": "1"}) == "python"


@needs_compiled
def test_compiled_backend_is_default():
    env = {k: v for k, v in os.environ.items() if k != "GAITDIAG_PURE_PYTHON"}
    out = subprocess.run([sys.executable, "-c", "import gaitdiag; print(gaitdiag.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "compiled"
