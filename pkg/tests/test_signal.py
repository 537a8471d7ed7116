import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from gaitdiag import synth
from gaitdiag.classifier import GaitLabel
from gaitdiag.errors import InsufficientSamples, InvalidCutoff, NonFiniteSample, OddOrder, StreamFormatError
from gaitdiag.signal import (
    CenteredWindow,
    RawWindow,
    SampleFrame,
    assemble_window,
    center,
    design_butterworth,
    filter_window,
    format_frame,
    frames_from_array,
    iter_windows,
    parse_frames,
    total_points,
    window_length,
)

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def frames(n, value=0.0):
    return [SampleFrame(*(value + i,) * 6, timestamp_us=i) for i in range(n)]


def walk_window(seed=0):
    rng = np.random.default_rng(seed)
    profile = synth.draw_profile(GaitLabel.WALK, rng)
    return RawWindow(synth.generate_array(profile, 3.0))


# --- window assembly --------------------------------------------------------


def test_window_sizing():
    assert total_points(3, 6, 59) == 1062
    assert window_length(3, 59) == 177
    assert total_points(1, 1, 10) == 10


def test_window_sizing_rejects_fractional_lengths():
    with pytest.raises(ValueError):
        window_length(0.5, 59)


def test_assemble_window_leaves_surplus_in_stream():
    it = iter(frames(200))
    w = assemble_window(it, 3, 59)
    assert w.samples.shape == (6, 177)
    assert w.samples[0, 0] == 0.0 and w.samples[0, -1] == 176.0
    assert next(it).ax1 == 177.0


def test_assemble_window_short_stream():
    with pytest.raises(InsufficientSamples):
        assemble_window(iter(frames(176)), 3, 59)


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_assemble_window_rejects_non_finite(bad):
    data = frames(177)
    data[50] = SampleFrame(0, 0, bad, 0, 0, 0)
    with pytest.raises(NonFiniteSample):
        assemble_window(iter(data), 3, 59)


def test_raw_window_rejects_non_finite_and_bad_shape():
    x = np.zeros((6, 177))
    x[3, 3] = np.nan
    with pytest.raises(NonFiniteSample):
        RawWindow(x)
    with pytest.raises(ValueError):
        RawWindow(np.zeros((5, 177)))


def test_iter_windows_tumbling_and_hop():
    assert len(list(iter_windows(frames(177 * 3 + 100)))) == 3
    assert list(iter_windows([])) == []
    hopped = list(iter_windows(frames(177 + 59 * 2), hop=59))
    assert len(hopped) == 3
    assert hopped[1].samples[0, 0] == 59.0
    with pytest.raises(ValueError):
        list(iter_windows(frames(10), hop=0))


# --- centering --------------------------------------------------------------


def test_center_constant_channel():
    x = np.zeros((6, 177))
    x[2] = 1.0
    c = center(RawWindow(x))
    assert np.all(c.samples == 0.0)
    assert c.stored_means[2] == 1.0


def test_center_small_example():
    x = np.tile([1.0, 2.0, 3.0], (6, 1))
    c = center(RawWindow(x, window_seconds=3 / 59))
    np.testing.assert_array_equal(c.samples[0], [-1.0, 0.0, 1.0])
    np.testing.assert_array_equal(c.stored_means, [2.0] * 6)


def test_center_walk_window_has_zero_means():
    c = center(walk_window())
    for row in c.samples:
        # independent summation order: reversed, then pairwise via fsum
        assert abs(math.fsum(reversed(row.tolist())) / len(row)) < 1e-9


def test_center_is_idempotent_bitwise():
    once = center(walk_window(1))
    twice = center(once)
    assert twice.samples.tobytes() == once.samples.tobytes()
    np.testing.assert_array_equal(twice.stored_means, once.stored_means)


def test_recentering_raw_copy_changes_nothing_material():
    once = center(walk_window(2))
    again = center(RawWindow(once.samples))
    np.testing.assert_allclose(again.samples, once.samples, rtol=0, atol=1e-15)


# --- Butterworth design -----------------------------------------------------


def test_design_matches_analytic_magnitude():
    coeffs = design_butterworth(6, 3.0, 59.0)
    freqs = np.linspace(0.0, 29.0, 59)
    measured = coeffs.gain_db(freqs[1:])
    expected = [oracles.butterworth_gain_db(f, 6, 3.0, 59.0) for f in freqs[1:]]
    np.testing.assert_allclose(measured, expected, atol=1e-9)


def test_design_against_scipy():
    scipy_signal = pytest.importorskip("scipy.signal")
    ours = design_butterworth(6, 3.0, 59.0)
    ref = scipy_signal.butter(6, 3.0, fs=59.0, output="sos")
    freqs = np.linspace(0.1, 29.4, 200)
    _, h_ref = scipy_signal.sosfreqz(ref, worN=freqs, fs=59.0)
    np.testing.assert_allclose(np.abs(ours.response(freqs)), np.abs(h_ref), rtol=1e-9, atol=1e-15)


def test_design_examples():
    coeffs = design_butterworth(6, 3.0, 59.0)
    assert coeffs.sections.shape == (3, 5)
    assert abs(coeffs.gain_db([3.0])[0] + 3.0103) <= 0.5
    assert coeffs.gain_db([6.0])[0] <= -30.0
    assert abs(abs(coeffs.response([0.0])[0]) - 1.0) <= 1e-6
    assert np.all(np.abs(coeffs.poles()) < 1.0)


def test_design_minimal_order():
    coeffs = design_butterworth(2, 10.0, 59.0)
    assert coeffs.sections.shape == (1, 5)
    assert np.all(np.abs(coeffs.poles()) < 1.0)


@pytest.mark.parametrize("cutoff", [30.0, 29.5, 0.0, -1.0])
def test_design_rejects_bad_cutoff(cutoff):
    with pytest.raises(InvalidCutoff):
        design_butterworth(6, cutoff, 59.0)


@pytest.mark.parametrize("order", [0, 1, 5])
def test_design_rejects_odd_order(order):
    with pytest.raises(OddOrder):
        design_butterworth(order, 3.0, 59.0)


@given(order=st.sampled_from([2, 4, 6, 8]), cutoff=st.floats(0.5, 25.0))
@settings(max_examples=40, deadline=None)
def test_design_always_stable_with_unit_dc(order, cutoff):
    coeffs = design_butterworth(order, cutoff, 59.0)
    assert np.all(np.abs(coeffs.poles()) < 1.0)
    assert abs(abs(coeffs.response([0.0])[0]) - 1.0) < 1e-9


# --- filtering --------------------------------------------------------------


def _filter_rows(x, coeffs=None):
    coeffs = coeffs or design_butterworth()
    x = np.atleast_2d(x)
    return filter_window(CenteredWindow(x, np.zeros(len(x))), coeffs).samples


def test_filter_zero_in_zero_out():
    assert np.all(_filter_rows(np.zeros((6, 177))) == 0.0)


@pytest.mark.parametrize("freq, bound", [(1.0, None), (20.0, -60.0)])
def test_filter_steady_state_gain(freq, bound):
    fs = 59.0
    n = 59 * 20
    t = np.arange(n) / fs
    y = _filter_rows(np.sin(2 * np.pi * freq * t))[0]
    amplitude = oracles.tone_amplitude(y[-59:], freq, fs)
    gain = 20 * math.log10(amplitude)
    if bound is None:
        assert abs(gain - oracles.butterworth_gain_db(freq, 6, 3.0, fs)) <= 0.5
    else:
        assert gain <= bound


def test_filter_impulse_response_decays():
    x = np.zeros(1770)
    x[0] = 1.0
    y = _filter_rows(x)[0]
    assert np.max(np.abs(y[-177:])) < 1e-9


def test_filter_preserves_shape_and_marks_window():
    w = center(walk_window())
    f = filter_window(w, design_butterworth())
    assert f.samples.shape == (6, 177) and f.filtered
    np.testing.assert_array_equal(f.stored_means, w.stored_means)


@given(
    x=arrays(np.float64, 177, elements=finite),
    y=arrays(np.float64, 177, elements=finite),
    a=st.floats(-5, 5),
    b=st.floats(-5, 5),
)
@settings(max_examples=50, deadline=None)
def test_filter_is_linear(x, y, a, b):
    lhs = _filter_rows(a * x + b * y)[0]
    rhs = a * _filter_rows(x)[0] + b * _filter_rows(y)[0]
    scale = max(1.0, np.max(np.abs(lhs)), np.max(np.abs(rhs)))
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * scale


# --- line format ------------------------------------------------------------


def test_parse_frames_six_and_seven_columns():
    text = ["x1,y1,z1,x2,y2,z2", "# comment", "1,2,3,4,5,6", "", "7,8,9,10,11,12"]
    got = list(parse_frames(text))
    assert [f.values for f in got] == [(1, 2, 3, 4, 5, 6), (7, 8, 9, 10, 11, 12)]
    assert got[1].timestamp_us == round(1e6 / 59)
    stamped = list(parse_frames(["1000,1,2,3,4,5,6"]))
    assert stamped[0].timestamp_us == 1000 and stamped[0].ax1 == 1.0


@pytest.mark.parametrize("line", ["1,2,3", "1,2,3,4,5,6,7,8", "1,2,3,4,5,x"])
def test_parse_frames_rejects_malformed(line):
    with pytest.raises(StreamFormatError):
        list(parse_frames(["1,2,3,4,5,6", line]))


def test_format_parse_round_trip():
    x = np.random.default_rng(3).normal(size=(6, 20))
    fr = list(frames_from_array(x))
    back = list(parse_frames([format_frame(f, with_timestamp=True) for f in fr]))
    assert back == fr


def test_sample_frame_from_values_checks_width():
    with pytest.raises(StreamFormatError):
        SampleFrame.from_values([1, 2, 3])
    assert SampleFrame.from_values(range(6)).values == (0, 1, 2, 3, 4, 5)
