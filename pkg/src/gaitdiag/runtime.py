"""Streaming diagnosis loop with per-stage latency instrumentation.

Each completed window goes through centering, filtering and feature
extraction, then the same feature vector feeds the classifier and the
anomaly scorer. Latencies are monotonic-clock deltas in microseconds.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator, Optional, Union

import numpy as np

from gaitdiag import anomaly, quantizer, synth
from gaitdiag.classifier import GaitLabel, MlpModel, forward, load_model_doc
from gaitdiag.errors import ModelFormatError, ModelVersionMismatch
from gaitdiag.features import LAYOUT_VERSION, extract_features
from gaitdiag.signal import (
    CUTOFF_HZ,
    FILTER_ORDER,
    SAMPLE_RATE_HZ,
    WINDOW_SECONDS,
    SampleFrame,
    center,
    design_butterworth,
    filter_window,
    frames_from_array,
    iter_windows,
)

STAGES = ("feature_us", "classify_us", "anomaly_us", "total_us")
Classifier = Union[MlpModel, quantizer.QuantizedMlpModel]


@dataclass
class RuntimeConfig:
    sample_rate_hz: float = SAMPLE_RATE_HZ
    window_seconds: float = WINDOW_SECONDS
    hop: Optional[int] = None  # samples; None = tumbling windows
    filter_order: int = FILTER_ORDER
    cutoff_hz: float = CUTOFF_HZ
    threshold: Optional[float] = None  # overrides the anomaly model's threshold
    concurrent: bool = False


@dataclass
class Latency:
    feature_us: float
    classify_us: float
    anomaly_us: float
    total_us: float


@dataclass
class Diagnosis:
    window_index: int
    label: GaitLabel
    probabilities: list
    anomaly_score: float
    anomalous: bool
    latency: Latency

    def payload(self) -> dict:
        """Everything except timing; identical across runs for identical input."""
        return {
            "window_index": self.window_index,
            "label": self.label.title,
            "label_code": int(self.label),
            "probabilities": [float(p) for p in self.probabilities],
            "anomaly_score": self.anomaly_score,
            "anomalous": self.anomalous,
        }

    def to_dict(self) -> dict:
        return {**self.payload(), "latency": asdict(self.latency)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_text(self) -> str:
        lat = self.latency
        flag = "ANOMALY" if self.anomalous else "normal"
        return (
            f"#{self.window_index} {self.label.title} ({max(self.probabilities):.2f}) "
            f"score {self.anomaly_score:.2f} {flag} | features {lat.feature_us:.0f} us, "
            f"classify {lat.classify_us:.0f} us, anomaly {lat.anomaly_us:.0f} us, "
            f"total {lat.total_us:.0f} us"
        )


def check_compatible(fmodel: Classifier, amodel: anomaly.AnomalyModel):
    layouts = {"classifier": fmodel.feature_layout, "anomaly": amodel.feature_layout}
    for name, layout in layouts.items():
        if layout != LAYOUT_VERSION:
            raise ModelVersionMismatch(f"{name} model uses feature layout {layout!r}, runtime has {LAYOUT_VERSION!r}")


def make_classifier(fmodel: Classifier):
    """Closure: raw feature vector -> (label, probabilities)."""
    if isinstance(fmodel, quantizer.QuantizedMlpModel):
        def classify(vec):
            return quantizer.quantized_forward(fmodel, fmodel.normalize(vec))
    else:
        def classify(vec):
            probs = forward(fmodel, fmodel.normalize(vec), "infer")
            return GaitLabel(int(np.argmax(probs))), probs
    return classify


def _us(t0: int, t1: int) -> float:
    return (t1 - t0) / 1000.0


def run_stream(
    source: Iterable[SampleFrame],
    fmodel: Classifier,
    amodel: anomaly.AnomalyModel,
    config: Optional[RuntimeConfig] = None,
) -> Iterator[Diagnosis]:
    """One Diagnosis per completed window.

    Stream errors (bad lines, NaNs) propagate after the Diagnoses already
    yielded. With ``config.concurrent`` the classifier and anomaly scorer run
    on two worker threads; results are identical to the sequential schedule,
    but ``total_us`` is then wall-clock and can be less than the stage sum.
    """
    config = config or RuntimeConfig()
    check_compatible(fmodel, amodel)
    coeffs = design_butterworth(config.filter_order, config.cutoff_hz, config.sample_rate_hz)
    classify = make_classifier(fmodel)
    threshold = amodel.threshold if config.threshold is None else config.threshold
    clock = time.perf_counter_ns
    pool = ThreadPoolExecutor(max_workers=2) if config.concurrent else None

    def timed(fn, *args):
        t0 = clock()
        out = fn(*args)
        return out, clock() - t0

    try:
        windows = iter_windows(source, config.window_seconds, config.sample_rate_hz, config.hop)
        for index, window in enumerate(windows):
            t0 = clock()
            vec = extract_features(filter_window(center(window), coeffs))
            t1 = clock()
            if pool is None:
                label, probs = classify(vec)
                t2 = clock()
                score = anomaly.score(amodel, vec)
                t3 = clock()
                classify_us, anomaly_us = _us(t1, t2), _us(t2, t3)
            else:
                fc = pool.submit(timed, classify, vec)
                fa = pool.submit(timed, anomaly.score, amodel, vec)
                (label, probs), dc = fc.result()
                score, da = fa.result()
                classify_us, anomaly_us = dc / 1000.0, da / 1000.0
            diag = Diagnosis(index, label, [float(p) for p in probs], score, score > threshold,
                             Latency(_us(t0, t1), classify_us, anomaly_us, 0.0))
            diag.latency.total_us = _us(t0, clock())
            yield diag
    finally:
        if pool is not None:
            pool.shutdown(wait=True)


# --- model loading ----------------------------------------------------------


def load_models(path):
    """Load ``(classifier, anomaly model or None)`` from a JSON model or an int8 blob."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == quantizer.MAGIC:
        qmodel = quantizer.import_quantized(path)
        section = qmodel.metadata.get("anomaly")
        return qmodel, anomaly.AnomalyModel.from_dict(section) if section else None
    try:
        doc = load_model_doc(path)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path} is neither a JSON model nor an int8 blob") from exc
    fmodel = MlpModel.from_dict(doc)
    section = doc.get("anomaly")
    return fmodel, anomaly.AnomalyModel.from_dict(section) if section else None


# --- benchmark --------------------------------------------------------------


@dataclass
class StageStats:
    min: float
    median: float
    p95: float
    max: float


@dataclass
class LatencyReport:
    windows: int
    backend: str
    model_kind: str
    stages: dict
    model_sizes: dict
    diagnoses: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "windows": self.windows,
            "backend": self.backend,
            "model_kind": self.model_kind,
            "stages": {k: asdict(v) for k, v in self.stages.items()},
            "model_sizes": self.model_sizes,
        }

    def to_text(self) -> str:
        lines = [f"{self.windows} windows, {self.model_kind} classifier, {self.backend} kernels",
                 f"{'stage':<12}{'min':>10}{'median':>10}{'p95':>10}{'max':>10}  (us)"]
        for name, s in self.stages.items():
            lines.append(f"{name:<12}{s.min:>10.1f}{s.median:>10.1f}{s.p95:>10.1f}{s.max:>10.1f}")
        lines.append("model sizes: " + ", ".join(f"{k} {v} B" for k, v in self.model_sizes.items()))
        return "\n".join(lines)


def benchmark_stream(windows: int, seed: int, sample_rate_hz: float = SAMPLE_RATE_HZ) -> list:
    """Concatenated synthetic windows cycling through all five scenarios."""
    per_class = math.ceil(windows / len(GaitLabel))
    by_class = {}
    for w in synth.synth_windows(per_class, seed):
        by_class.setdefault(w.label, []).append(w.samples)
    order = [by_class[GaitLabel(i % len(GaitLabel))][i // len(GaitLabel)] for i in range(windows)]
    return list(frames_from_array(np.concatenate(order, axis=1), sample_rate_hz))


def model_sizes(fmodel: Classifier) -> dict:
    if isinstance(fmodel, quantizer.QuantizedMlpModel):
        n_weights = sum(l.weights.size for l in fmodel.layers)
        n_bias = sum(l.bias.size for l in fmodel.layers)
        return {
            "float32_bytes": 4 * (n_weights + n_bias),
            "int8_bytes": fmodel.payload_bytes(),
            "blob_bytes": len(quantizer.to_bytes(fmodel)),
        }
    n = fmodel.n_parameters()
    n_bias = sum(b.size for b in fmodel.biases)
    return {"float32_bytes": 4 * n, "int8_bytes": (n - n_bias) + 4 * n_bias}


def benchmark(fmodel: Classifier, amodel: anomaly.AnomalyModel, windows: int = 100, seed: int = 0,
              config: Optional[RuntimeConfig] = None) -> LatencyReport:
    if windows < 1:
        raise ValueError("windows must be >= 1")
    from gaitdiag import kernels

    frames = benchmark_stream(windows, seed)
    diagnoses = list(run_stream(frames, fmodel, amodel, config))
    stats = {}
    for stage in STAGES:
        values = np.array([getattr(d.latency, stage) for d in diagnoses])
        stats[stage] = StageStats(float(values.min()), float(np.median(values)),
                                  float(np.percentile(values, 95)), float(values.max()))
    kind = "int8" if isinstance(fmodel, quantizer.QuantizedMlpModel) else "float32"
    return LatencyReport(len(diagnoses), kernels.BACKEND, kind, stats, model_sizes(fmodel), diagnoses)
