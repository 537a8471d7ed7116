import re
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from gaitdiag import classifier as C
from gaitdiag import quantizer as Q
from gaitdiag.classifier import LabeledDataset
from gaitdiag.errors import (
    AccumulatorOverflow,
    ChecksumMismatch,
    DimensionMismatch,
    EmptyCalibrationSet,
    ModelFormatError,
    UncalibratedTensor,
)
from gaitdiag.rng import make_rng


def random_qmodel(seed, n=40):
    rng = np.random.default_rng(seed)
    model = C.init_model([222, 20, 10, 5], make_rng(seed))
    model.biases = [rng.normal(scale=0.1, size=b.shape) for b in model.biases]
    ds = LabeledDataset(rng.normal(size=(n, 222)), rng.integers(0, 5, n))
    return model, Q.quantize(model, Q.calibrate(model, ds))


# --- scalar building blocks -------------------------------------------------


def test_round_half_away():
    assert [Q.round_half_away(v) for v in (0.5, -0.5, 1.5, -2.5, 2.4999, 0.0)] == [1, -1, 2, -3, 2, 0]
    np.testing.assert_array_equal(Q.round_half_away(np.array([63.5, -63.5])), [64, -64])


@given(v=st.floats(-1e6, 1e6, allow_nan=False))
def test_round_half_away_matches_oracle(v):
    assert Q.round_half_away(v) == oracles.half_away(v)


def test_weight_example():
    q, scale = Q.quantize_weights([-1.0, 0.5, 1.0])
    assert scale == 1 / 127
    assert q.tolist() == [-127, 64, 127]


def test_all_zero_weights_use_scale_floor():
    q, scale = Q.quantize_weights(np.zeros((3, 4)))
    assert scale == Q.MIN_RANGE / 127
    assert np.all(q == 0)


@given(w=arrays(np.float64, (7, 5), elements=st.floats(-10, 10, allow_nan=False)))
@settings(max_examples=80)
def test_weight_round_trip_within_half_step(w):
    q, scale = Q.quantize_weights(w)
    assert q.dtype == np.int8 and np.all(np.abs(q.astype(int)) <= 127)
    assert np.all(np.abs(q * scale - w) <= scale / 2 * (1 + 1e-12))


def test_affine_params():
    p = Q.affine_params(0.0, 2.55)
    assert p.scale == pytest.approx(0.01) and p.zero_point == -128
    sym = Q.affine_params(-1.0, 1.0)
    assert sym.zero_point == -1  # -128 + 127.5, ties away from zero
    pos = Q.affine_params(2.0, 5.0)  # widened down to 0
    assert pos.dequantize(pos.quantize(0.0)) == 0.0
    flat = Q.affine_params(0.0, 0.0)
    assert flat.scale == pytest.approx(Q.MIN_RANGE / 255)
    assert -128 <= flat.zero_point <= 127


@given(real=st.floats(1e-9, 0.99))
def test_fixed_point_multiplier(real):
    m0, shift = Q.fixed_point_multiplier(real)
    assert 2**30 <= m0 < 2**31
    assert abs(m0 * 2.0**-shift - real) <= real * 2**-30


def test_fixed_point_multiplier_rejects_non_positive():
    with pytest.raises(ValueError):
        Q.fixed_point_multiplier(0.0)


# --- calibration ------------------------------------------------------------


def test_calibration_requires_rows(float_model):
    with pytest.raises(EmptyCalibrationSet):
        Q.calibrate(float_model, LabeledDataset(np.zeros((0, 222)), []))


def test_single_zero_row_ranges_contain_zero():
    model = C.init_model([222, 20, 10, 5], make_rng(0))
    ranges = Q.calibrate(model, LabeledDataset(np.zeros((1, 222)), [0]))
    for t in Q.TENSORS:
        lo, hi = ranges[t]
        assert lo <= 0.0 <= hi
    qmodel = Q.quantize(model, ranges)
    assert all(l.out_q.scale > 0 for l in qmodel.layers)


def test_train_ranges_cover_validation(float_model, gait_data):
    _, train, val, _ = gait_data
    ranges = Q.calibrate(float_model, train)
    acts = Q.activation_tensors(float_model, float_model.normalize(val.features))
    for name, t in acts.items():
        lo, hi = ranges[name]
        inside = np.mean((t >= lo) & (t <= hi))
        assert inside >= 0.99, name


def test_missing_range_is_rejected(float_model, gait_data):
    ranges = Q.calibrate(float_model, gait_data[1])
    del ranges["hidden2"]
    with pytest.raises(UncalibratedTensor):
        Q.quantize(float_model, ranges)


# --- quantized model --------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_every_weight_within_half_step(seed):
    model, qmodel = random_qmodel(seed)
    for w, layer in zip(model.weights, qmodel.layers):
        assert np.all(np.abs(layer.dequantized_weights() - w) <= layer.weight_scale / 2 * (1 + 1e-12))
        assert layer.bias.dtype == np.int32
        assert -128 <= layer.out_q.zero_point <= 127
    assert qmodel.layer_sizes == [222, 20, 10, 5]


def test_zero_input_zero_bias_gives_uniform():
    model = C.init_model([222, 20, 10, 5], make_rng(4))
    model.biases = [np.zeros_like(b) for b in model.biases]
    ds = LabeledDataset(np.random.default_rng(0).normal(size=(20, 222)), np.zeros(20))
    qmodel = Q.quantize(model, Q.calibrate(model, ds))
    label, probs = Q.quantized_forward(qmodel, np.zeros(222))
    np.testing.assert_allclose(probs, [0.2] * 5, atol=1e-15)
    assert int(label) == 0


def test_quantized_forward_input_checks(int8_model):
    with pytest.raises(DimensionMismatch):
        Q.quantized_forward(int8_model, np.zeros(10))


def test_quantized_forward_is_deterministic(int8_model, gait_data):
    x = int8_model.normalize(gait_data[3].features[0])
    a, b = Q.quantized_forward(int8_model, x), Q.quantized_forward(int8_model, x)
    assert a[0] == b[0] and a[1].tobytes() == b[1].tobytes()


def test_agreement_with_float_model(float_model, int8_model, gait_data):
    test = gait_data[3]
    x = float_model.normalize(test.features)
    agree = np.mean(Q.quantized_predict_batch(int8_model, x) == C.predict_batch(float_model, x))
    assert agree >= 0.90


def test_int8_accuracy_degradation_bound(float_model, int8_model, gait_data):
    test = gait_data[3]
    x = float_model.normalize(test.features)
    float_acc = np.mean(C.predict_batch(float_model, x) == test.labels)
    int8_acc = np.mean(Q.quantized_predict_batch(int8_model, x) == test.labels)
    assert int8_acc >= float_acc - 0.08


@pytest.mark.parametrize("row", range(0, 75, 5))
def test_layers_track_dequantized_oracle(int8_model, gait_data, row):
    x = int8_model.normalize(gait_data[3].features[row])
    got = Q.layer_outputs(int8_model, x)
    for layer_got, layer_want in zip(got, oracles.dequantized_layer_oracle(int8_model, x)):
        assert np.max(np.abs(layer_got.astype(int) - layer_want)) <= 2


def test_runner_matches_layer_outputs(int8_model, gait_data):
    x = int8_model.normalize(gait_data[3].features[3])
    logits_q, _ = int8_model.runner.run(x)
    assert np.array_equal(logits_q, Q.layer_outputs(int8_model, x)[-1])


def test_accumulator_overflow_is_detected():
    model, qmodel = random_qmodel(0)
    first = qmodel.layers[0]
    first.weights[:] = 127
    first.bias[:] = 2**31 - 1000
    qmodel._runner = None
    x = np.full(222, 1e6)
    with pytest.raises(AccumulatorOverflow):
        Q.quantized_forward(qmodel, x)
    with pytest.raises(AccumulatorOverflow):
        Q.layer_outputs(qmodel, x)


# --- binary blob ------------------------------------------------------------


def test_blob_round_trip_is_bitwise(int8_model):
    blob = Q.to_bytes(int8_model)
    back = Q.from_bytes(blob)
    assert Q.to_bytes(back) == blob
    for a, b in zip(int8_model.layers, back.layers):
        assert a.weights.tobytes() == b.weights.tobytes()
        assert a.bias.tobytes() == b.bias.tobytes()
        assert (a.weight_scale, a.in_q, a.out_q, a.multiplier, a.shift, a.relu) == \
               (b.weight_scale, b.in_q, b.out_q, b.multiplier, b.shift, b.relu)
    assert back.input_q == int8_model.input_q
    assert back.norm_mean.tobytes() == int8_model.norm_mean.tobytes()
    assert back.metadata == int8_model.metadata


def test_blob_file_export(tmp_path, int8_model):
    blob = Q.export_quantized(int8_model, tmp_path / "m.q8", tmp_path / "m.h")
    assert (tmp_path / "m.q8").read_bytes() == blob
    assert Q.to_bytes(Q.import_quantized(tmp_path / "m.q8")) == blob


def test_corrupted_blob_is_rejected(int8_model):
    blob = bytearray(Q.to_bytes(int8_model))
    blob[100] ^= 0x01
    with pytest.raises(ChecksumMismatch):
        Q.from_bytes(bytes(blob))


def test_bad_magic_and_version(int8_model):
    import zlib

    def resealed(body):
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    body = Q.to_bytes(int8_model)[:-4]
    with pytest.raises(ModelFormatError):
        Q.from_bytes(resealed(b"XXXX" + body[4:]))
    with pytest.raises(ModelFormatError):
        Q.from_bytes(resealed(body[:4] + struct.pack("<H", 9) + body[6:]))
    with pytest.raises(ModelFormatError):
        Q.from_bytes(b"GDQ8")


def test_blob_size_follows_layout(int8_model):
    blob = Q.to_bytes(int8_model)
    meta_len = len(Q._meta_bytes(int8_model.metadata))
    assert len(blob) == Q.blob_size([222, 20, 10, 5], meta_len)
    payload = 222 * 20 + 20 * 10 + 10 * 5
    assert int8_model.payload_bytes() == payload + 4 * (20 + 10 + 5)
    assert payload < len(blob)


def test_c_array_parses_back(int8_model):
    blob = Q.to_bytes(int8_model)
    text = Q.render_c_array(blob, "demo")
    assert f"demo_len = {len(blob)};" in text
    body = text[text.index("{") + 1 : text.rindex("}")]
    values = bytes(int(tok, 16) for tok in re.findall(r"0x([0-9a-f]{2})", body))
    assert values == blob
