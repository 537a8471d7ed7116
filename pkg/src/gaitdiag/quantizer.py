"""Post-training int8 quantization and the integer inference path.

Scheme: symmetric per-tensor int8 weights (zero point 0), affine per-tensor
int8 activations, int32 biases at scale ``input_scale * weight_scale``.
Requantization uses a 31-bit fixed-point multiplier plus a right shift, so
everything up to the final dequantize is integer arithmetic. Rounding is
half-away-from-zero throughout.

Binary layout (little-endian), version 1::

    "GDQ8" | u16 version | u8 n_layers | u8 0 | u16 sizes[n_layers + 1]
    f64 input_scale | i8 input_zp
    f64 norm_mean[n_in] | f64 norm_std[n_in]
    per layer: f64 weight_scale | f64 out_scale | i8 out_zp | u8 relu
               | i32 multiplier | i8 shift | i8 weights[in * out] (row-major
               in x out) | i32 bias[out]
    u32 meta_len | meta_len bytes of UTF-8 JSON (sorted keys)
    u32 crc32 of everything above
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from gaitdiag import kernels
from gaitdiag.classifier import (
    LABEL_MAP,
    GaitLabel,
    LabeledDataset,
    MlpModel,
    _forward_pass,
)
from gaitdiag.errors import (
    AccumulatorOverflow,
    ChecksumMismatch,
    DimensionMismatch,
    EmptyCalibrationSet,
    ModelFormatError,
    NonFiniteInput,
    UncalibratedTensor,
)
from gaitdiag.io import atomic_write_bytes, atomic_write_text

MAGIC = b"GDQ8"
BLOB_VERSION = 1
QMIN, QMAX = -128, 127
MIN_RANGE = 1e-6
TENSORS = ("input", "hidden1", "hidden2", "logits")
_LAYER_HEAD = struct.Struct("<ddbBib")


def round_half_away(x):
    """Round to nearest integer, ties away from zero (scalar or array)."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    fl = np.floor(a)
    r = np.where(a - fl >= 0.5, fl + 1.0, fl)
    out = np.copysign(r, x)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class TensorQuant:
    scale: float
    zero_point: int

    def quantize(self, x) -> np.ndarray:
        q = round_half_away(np.asarray(x, dtype=np.float64) / self.scale) + self.zero_point
        return np.clip(q, QMIN, QMAX).astype(np.int8)

    def dequantize(self, q) -> np.ndarray:
        return (np.asarray(q, dtype=np.float64) - self.zero_point) * self.scale


def affine_params(lo: float, hi: float) -> TensorQuant:
    """Asymmetric int8 parameters for an observed range, widened to contain 0."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    if hi - lo < MIN_RANGE:
        hi = lo + MIN_RANGE
    scale = (hi - lo) / (QMAX - QMIN)
    zp = int(np.clip(round_half_away(QMIN - lo / scale), QMIN, QMAX))
    return TensorQuant(scale, zp)


def quantize_weights(w):
    """Symmetric per-tensor int8: scale = max|w| / 127, zero point 0."""
    w = np.asarray(w, dtype=np.float64)
    amax = float(np.max(np.abs(w))) if w.size else 0.0
    scale = max(amax, MIN_RANGE) / QMAX
    q = np.clip(round_half_away(w / scale), -QMAX, QMAX).astype(np.int8)
    return q, scale


def fixed_point_multiplier(real: float):
    """Split ``real`` into (m0, shift) with real ~= m0 * 2**-shift, m0 in [2**30, 2**31)."""
    if not real > 0:
        raise ValueError(f"requantization multiplier must be positive, got {real}")
    mant, exp = math.frexp(real)
    m0 = int(round_half_away(mant * (1 << 31)))
    if m0 == 1 << 31:
        m0 //= 2
        exp += 1
    shift = 31 - exp
    if shift < 1:
        raise ValueError(f"multiplier {real} too large for int32 fixed point")
    if shift > 62:
        m0 >>= shift - 62
        shift = 62
    return m0, shift


@dataclass
class QuantizedLayer:
    weights: np.ndarray  # int8 (in, out)
    weight_scale: float
    bias: np.ndarray  # int32 (out,)
    in_q: TensorQuant
    out_q: TensorQuant
    multiplier: int
    shift: int
    relu: bool

    def dequantized_weights(self) -> np.ndarray:
        return self.weights.astype(np.float64) * self.weight_scale


@dataclass
class QuantizedMlpModel:
    layers: list
    input_q: TensorQuant
    norm_mean: np.ndarray
    norm_std: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.layers[0].weights.shape[0]] + [l.weights.shape[1] for l in self.layers]

    @property
    def feature_layout(self) -> str:
        return self.metadata.get("feature_layout", "")

    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.norm_mean) / self.norm_std

    def payload_bytes(self) -> int:
        return sum(l.weights.size + 4 * l.bias.size for l in self.layers)

    @property
    def runner(self):
        """Compiled forward-pass runner, built on first use."""
        if getattr(self, "_runner", None) is None:
            self._runner = kernels.int8_mlp(
                self.input_q.scale, self.input_q.zero_point, kernels.pack_int8_layers(self.layers)
            )
        return self._runner


def activation_tensors(model: MlpModel, x: np.ndarray) -> dict:
    (z1, h1, z2, h2, z3), _ = _forward_pass(model, np.atleast_2d(x), None)
    return {"input": np.atleast_2d(x), "hidden1": h1, "hidden2": h2, "logits": z3}


def calibrate(model: MlpModel, calibration_set: LabeledDataset) -> dict:
    """Min/max of every activation tensor over the (normalized) calibration rows."""
    if len(calibration_set) == 0:
        raise EmptyCalibrationSet("calibration set is empty")
    x = model.normalize(calibration_set.features)
    ranges = {}
    for name, t in activation_tensors(model, x).items():
        ranges[name] = (min(float(t.min()), 0.0), max(float(t.max()), 0.0))
    ranges["_dataset_hash"] = hashlib.sha256(
        np.ascontiguousarray(calibration_set.features).tobytes()
    ).hexdigest()[:16]
    return ranges


def quantize(model: MlpModel, ranges: dict) -> QuantizedMlpModel:
    missing = [t for t in TENSORS if t not in ranges]
    if missing:
        raise UncalibratedTensor(f"no calibration range for {', '.join(missing)}")
    act = {t: affine_params(*ranges[t]) for t in TENSORS}
    layers = []
    in_q = act["input"]
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        out_q = act[TENSORS[i + 1]]
        qw, ws = quantize_weights(w)
        bias_scale = in_q.scale * ws
        qb = round_half_away(np.asarray(b) / bias_scale)
        if np.any(np.abs(qb) > 2**31 - 1):
            raise AccumulatorOverflow(f"layer {i} bias does not fit int32")
        m0, shift = fixed_point_multiplier(bias_scale / out_q.scale)
        layers.append(
            QuantizedLayer(qw, ws, qb.astype(np.int32), in_q, out_q, m0, shift,
                           relu=model.activations[i] == "relu")
        )
        in_q = out_q
    meta = {
        "feature_layout": model.feature_layout,
        "labels": {str(k): v for k, v in LABEL_MAP.items()},
        "calibration": {
            "dataset_hash": ranges.get("_dataset_hash"),
            "ranges": {t: list(ranges[t]) for t in TENSORS},
        },
    }
    return QuantizedMlpModel(layers, act["input"], model.norm_mean.copy(), model.norm_std.copy(), meta)


def layer_outputs(qmodel: QuantizedMlpModel, x_normalized) -> list:
    """Integer pre-activation outputs of every layer (before the ReLU clamp)."""
    x = np.asarray(x_normalized, dtype=np.float64)
    if x.shape != (qmodel.layer_sizes[0],):
        raise DimensionMismatch(f"expected a {qmodel.layer_sizes[0]}-vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("input contains NaN or Inf")
    q = kernels.quantize_input(x, qmodel.input_q.scale, qmodel.input_q.zero_point)
    outs = []
    for i, layer in enumerate(qmodel.layers):
        pre, bad = kernels.dense_int8(
            q, layer.in_q.zero_point, layer.weights, layer.bias,
            layer.multiplier, layer.shift, layer.out_q.zero_point,
        )
        if pre is None:
            raise AccumulatorOverflow(f"layer {i} accumulator {bad} left int32 range")
        outs.append(pre)
        q = np.maximum(pre, np.int8(layer.out_q.zero_point)) if layer.relu else pre
    return outs


def quantized_forward(qmodel: QuantizedMlpModel, x_normalized):
    """Integer inference; only the final dequantize and softmax are floating point."""
    x = np.asarray(x_normalized, dtype=np.float64)
    if x.shape != (qmodel.layer_sizes[0],):
        raise DimensionMismatch(f"expected a {qmodel.layer_sizes[0]}-vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("input contains NaN or Inf")
    logits_q, bad = qmodel.runner.run(x)
    if logits_q is None:
        raise AccumulatorOverflow(f"layer {bad} accumulator left int32 range")
    out_q = qmodel.layers[-1].out_q
    logits = [(q - out_q.zero_point) * out_q.scale for q in logits_q.tolist()]
    top = max(logits)
    e = [math.exp(v - top) for v in logits]
    total = sum(e)
    probs = np.array([v / total for v in e])
    return GaitLabel(logits.index(top)), probs


def quantized_predict_batch(qmodel: QuantizedMlpModel, x_normalized) -> np.ndarray:
    return np.array([int(quantized_forward(qmodel, row)[0]) for row in np.atleast_2d(x_normalized)])


# --- binary export ----------------------------------------------------------


def _meta_bytes(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def blob_size(sizes, meta_len: int) -> int:
    """Byte length of an exported blob, from the layout alone."""
    n_layers = len(sizes) - 1
    size = 4 + 2 + 1 + 1 + 2 * (n_layers + 1) + 9 + 16 * sizes[0]
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        size += _LAYER_HEAD.size + fan_in * fan_out + 4 * fan_out
    return size + 4 + meta_len + 4


def to_bytes(qmodel: QuantizedMlpModel) -> bytes:
    sizes = qmodel.layer_sizes
    parts = [
        MAGIC,
        struct.pack("<HBB", BLOB_VERSION, len(qmodel.layers), 0),
        struct.pack(f"<{len(sizes)}H", *sizes),
        struct.pack("<db", qmodel.input_q.scale, qmodel.input_q.zero_point),
        np.asarray(qmodel.norm_mean, dtype="<f8").tobytes(),
        np.asarray(qmodel.norm_std, dtype="<f8").tobytes(),
    ]
    for layer in qmodel.layers:
        parts.append(
            _LAYER_HEAD.pack(layer.weight_scale, layer.out_q.scale, layer.out_q.zero_point,
                             int(layer.relu), layer.multiplier, layer.shift)
        )
        parts.append(np.ascontiguousarray(layer.weights, dtype=np.int8).tobytes())
        parts.append(np.asarray(layer.bias, dtype="<i4").tobytes())
    meta = _meta_bytes(qmodel.metadata)
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def from_bytes(blob: bytes) -> QuantizedMlpModel:
    if len(blob) < 12:
        raise ModelFormatError("blob too short")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch("CRC32 mismatch: model blob is corrupted")
    if body[:4] != MAGIC:
        raise ModelFormatError("bad magic")
    version, n_layers, _ = struct.unpack_from("<HBB", body, 4)
    if version != BLOB_VERSION:
        raise ModelFormatError(f"unsupported blob version {version}")
    off = 8
    sizes = list(struct.unpack_from(f"<{n_layers + 1}H", body, off))
    off += 2 * (n_layers + 1)
    in_scale, in_zp = struct.unpack_from("<db", body, off)
    off += 9
    n_in = sizes[0]
    mean = np.frombuffer(body, dtype="<f8", count=n_in, offset=off).astype(np.float64)
    off += 8 * n_in
    std = np.frombuffer(body, dtype="<f8", count=n_in, offset=off).astype(np.float64)
    off += 8 * n_in
    input_q = TensorQuant(in_scale, in_zp)
    layers = []
    in_q = input_q
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        ws, out_scale, out_zp, relu, m0, shift = _LAYER_HEAD.unpack_from(body, off)
        off += _LAYER_HEAD.size
        w = np.frombuffer(body, dtype=np.int8, count=fan_in * fan_out, offset=off).reshape(fan_in, fan_out).copy()
        off += fan_in * fan_out
        b = np.frombuffer(body, dtype="<i4", count=fan_out, offset=off).astype(np.int32)
        off += 4 * fan_out
        out_q = TensorQuant(out_scale, out_zp)
        layers.append(QuantizedLayer(w, ws, b, in_q, out_q, m0, shift, bool(relu)))
        in_q = out_q
    (meta_len,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off : off + meta_len].decode("utf-8"))
    off += meta_len
    if off != len(body):
        raise ModelFormatError(f"{len(body) - off} trailing bytes before CRC")
    return QuantizedMlpModel(layers, input_q, mean, std, meta)


def render_c_array(blob: bytes, name: str = "gdu_model") -> str:
    crc = struct.unpack("<I", blob[-4:])[0]
    lines = [
        f"/* int8 gait model, {len(blob)} bytes, crc32 0x{crc:08x}. Generated file. */",
        "#include <stdint.h>",
        "",
        f"const unsigned int {name}_len = {len(blob)};",
        f"const uint8_t {name}[{len(blob)}] = {{",
    ]
    for i in range(0, len(blob), 12):
        lines.append("  " + ", ".join(f"0x{b:02x}" for b in blob[i : i + 12]) + ",")
    lines.append("};")
    return "\n".join(lines) + "\n"


def export_quantized(qmodel: QuantizedMlpModel, path, c_array_path: Optional[str] = None) -> bytes:
    """Write the binary blob (and optionally its C-array rendering); returns the blob."""
    blob = to_bytes(qmodel)
    atomic_write_bytes(path, blob)
    if c_array_path is not None:
        atomic_write_text(c_array_path, render_c_array(blob))
    return blob


def import_quantized(path) -> QuantizedMlpModel:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
