"""Command-line entry point.

Every command reads one JSON project config (``--config``), applies flag
overrides on top of it (flags win), and resolves its data, model and report
directories under a workspace root: ``--out`` if given, else the directory of
the config file, else the current directory. Each command writes a JSON
report stamped with the hash of the effective config and the artifact
versions, and prints either a human-readable summary or that JSON.

Typical recipe::

    gaitdiag generate --out work
    gaitdiag train --out work
    gaitdiag quantize --out work
    gaitdiag fit-anomaly --out work
    gaitdiag evaluate --out work
    cat work/data/streams/0000_idle.csv | gaitdiag diagnose - --out work
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from gaitdiag import __version__, anomaly, classifier, quantizer, runtime, synth
from gaitdiag.classifier import GaitLabel, LabeledDataset, MetricsReport, TrainConfig
from gaitdiag.errors import ConfigError, GaitDiagError, InvalidCutoff, OddOrder
from gaitdiag.features import FFT_LENGTH, LAYOUT_VERSION, csv_header, to_csv_row
from gaitdiag.io import atomic_write_text
from gaitdiag.rng import derive_seed
from gaitdiag.signal import (
    CHANNELS,
    design_butterworth,
    format_frame,
    frames_from_array,
    parse_frames,
    window_length,
)

logger = logging.getLogger("gaitdiag")

VERSIONS = {
    "gaitdiag": __version__,
    "feature_layout": LAYOUT_VERSION,
    "model_format": classifier.MODEL_FORMAT_VERSION,
    "blob_format": quantizer.BLOB_VERSION,
}

# --- configuration ----------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class PathsConfig:
    data: str = "data"
    models: str = "models"
    reports: str = "reports"


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    sample_rate_hz: float = 59.0
    window_seconds: float = 3.0
    filter_order: int = 6
    cutoff_hz: float = 3.0
    fft_length: int = FFT_LENGTH
    hop: Optional[int] = None

    def validate(self):
        try:
            design_butterworth(self.filter_order, self.cutoff_hz, self.sample_rate_hz)
        except (InvalidCutoff, OddOrder) as exc:
            raise ConfigError(f"pipeline: {exc}") from None
        if self.fft_length != FFT_LENGTH:
            raise ConfigError(f"pipeline.fft_length must be {FFT_LENGTH} for the 222-value feature layout")
        if window_length(self.window_seconds, self.sample_rate_hz) < self.fft_length:
            raise ConfigError("pipeline: a window must hold at least fft_length samples")
        if self.hop is not None and self.hop < 1:
            raise ConfigError("pipeline.hop must be a positive sample count or null")

    def coefficients(self):
        return design_butterworth(self.filter_order, self.cutoff_hz, self.sample_rate_hz)

    def runtime(self, threshold: Optional[float] = None) -> runtime.RuntimeConfig:
        return runtime.RuntimeConfig(self.sample_rate_hz, self.window_seconds, self.hop,
                                     self.filter_order, self.cutoff_hz, threshold)


@dataclasses.dataclass(frozen=True)
class DatasetConfig:
    per_class: int = 75
    anomalous_per_kind: int = 20
    split: tuple = (0.6, 0.2, 0.2)

    def validate(self):
        if self.per_class < 1:
            raise ConfigError("dataset.per_class must be >= 1")
        if self.anomalous_per_kind < 0:
            raise ConfigError("dataset.anomalous_per_kind must be >= 0")
        if len(self.split) != 3 or min(self.split) <= 0 or abs(sum(self.split) - 1) > 1e-9:
            raise ConfigError("dataset.split must be three positive fractions summing to 1")


@dataclasses.dataclass(frozen=True)
class TrainSection:
    epochs: int = 500
    learning_rate: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    hidden: tuple = (20, 10)
    dropout_rate: float = 0.5

    def validate(self):
        try:
            self.to_train_config(0)
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from None

    def to_train_config(self, seed: int) -> TrainConfig:
        # the validation split is made explicitly by the CLI
        return TrainConfig(seed=seed, validation_fraction=0.0, **dataclasses.asdict(self))


@dataclasses.dataclass(frozen=True)
class AnomalySection:
    clusters: int = anomaly.DEFAULT_CLUSTERS
    threshold: float = anomaly.DEFAULT_THRESHOLD
    features: str = "preset"

    def validate(self):
        if self.clusters < 1:
            raise ConfigError("anomaly.clusters must be >= 1")
        if not self.threshold >= 0:
            raise ConfigError("anomaly.threshold must be >= 0")
        if self.features not in ("preset", "auto"):
            raise ConfigError("anomaly.features must be 'preset' or 'auto'")


_SECTIONS = {
    "paths": PathsConfig,
    "pipeline": PipelineConfig,
    "dataset": DatasetConfig,
    "train": TrainSection,
    "anomaly": AnomalySection,
}


@dataclasses.dataclass(frozen=True)
class ProjectConfig:
    seed: int = 0
    paths: PathsConfig = PathsConfig()
    pipeline: PipelineConfig = PipelineConfig()
    dataset: DatasetConfig = DatasetConfig()
    train: TrainSection = TrainSection()
    anomaly: AnomalySection = AnomalySection()

    def validate(self) -> "ProjectConfig":
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        for name in _SECTIONS:
            section = getattr(self, name)
            if hasattr(section, "validate"):
                section.validate()
        return self

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def sub_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)

    def override(self, section: Optional[str] = None, **values) -> "ProjectConfig":
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        if section is None:
            return dataclasses.replace(self, **values)
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **values)})


def _coerce(value, default, where: str):
    if isinstance(default, bool) or isinstance(value, bool):
        raise ConfigError(f"{where}: booleans are not accepted")
    if isinstance(default, int) or (default is None and isinstance(value, int)):
        if not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(_coerce(v, default[0], f"{where}[{i}]") for i, v in enumerate(value))
    if default is None and value is None:
        return None
    raise ConfigError(f"{where}: unsupported value {value!r}")


def _build_section(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    defaults = cls()
    kwargs = {k: _coerce(v, getattr(defaults, k), f"{where}.{k}") for k, v in doc.items()}
    return cls(**kwargs)


def config_from_dict(doc: dict) -> ProjectConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - {"seed", *_SECTIONS})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {name: _build_section(cls, doc[name], name) for name, cls in _SECTIONS.items() if name in doc}
    if "seed" in doc:
        kwargs["seed"] = _coerce(doc["seed"], 0, "seed")
    return ProjectConfig(**kwargs).validate()


def load_config(path: Optional[str]) -> ProjectConfig:
    if path is None:
        return ProjectConfig().validate()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(doc)


# --- workspace --------------------------------------------------------------


@dataclasses.dataclass
class Workspace:
    config: ProjectConfig
    root: Path

    @property
    def data(self) -> Path:
        return self.root / self.config.paths.data

    @property
    def models(self) -> Path:
        return self.root / self.config.paths.models

    @property
    def reports(self) -> Path:
        return self.root / self.config.paths.reports

    @property
    def features_csv(self) -> Path:
        return self.data / "features.csv"

    @property
    def anomalous_csv(self) -> Path:
        return self.data / "anomalous.csv"

    @property
    def model_json(self) -> Path:
        return self.models / "model.json"

    @property
    def model_blob(self) -> Path:
        return self.models / "model.q8"

    @property
    def model_header(self) -> Path:
        return self.models / "model_q8.h"

    def report(self, command: str, body: dict) -> dict:
        doc = {
            "command": command,
            "config_hash": self.config.digest(),
            "versions": VERSIONS,
            "config": self.config.to_dict(),
            **body,
        }
        atomic_write_text(self.reports / f"{command}.json", _dumps(doc))
        return doc


def _dumps(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; {hint}")
    return path


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def _write_feature_csv(path: Path, key: str, keys: list, rows) -> None:
    lines = [f"{key},{csv_header()}"]
    lines += [f"{k},{to_csv_row(v)}" for k, v in zip(keys, rows)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def _read_feature_csv(path: Path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.strip():
            raise ValueError(f"{path} is empty")
        keys, rows = [], []
        for lineno, line in enumerate(fh, 2):
            if not line.strip():
                continue
            key, _, rest = line.partition(",")
            try:
                rows.append([float(c) for c in rest.split(",")])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed feature row") from None
            keys.append(key)
    return keys, np.array(rows, dtype=np.float64)


def _load_dataset(ws: Workspace) -> LabeledDataset:
    path = _require(ws.features_csv, "run `gaitdiag generate` first")
    keys, rows = _read_feature_csv(path)
    return LabeledDataset(rows, [int(k) for k in keys])


def _load_model_doc(ws: Workspace) -> dict:
    return classifier.load_model_doc(_require(ws.model_json, "run `gaitdiag train` first"))


def _split(doc: dict, name: str) -> np.ndarray:
    try:
        return np.array(doc["split"][name], dtype=np.int64)
    except KeyError:
        raise ConfigError("model file carries no data split; retrain it with `gaitdiag train`") from None


# --- commands ---------------------------------------------------------------


def cmd_generate(ws: Workspace, args) -> dict:
    cfg = ws.config
    pipe = cfg.pipeline
    coeffs = pipe.coefficients()
    seed = cfg.sub_seed("generate")
    header = "timestamp_us," + ",".join(CHANNELS)

    def emit(windows, prefix):
        rows, entries = [], []
        for i, w in enumerate(windows):
            name = w.label.title if isinstance(w.label, GaitLabel) else w.label
            rel = f"streams/{prefix}{i:04d}_{name.lower()}.csv"
            frames = frames_from_array(w.samples, pipe.sample_rate_hz)
            atomic_write_text(ws.data / rel, "\n".join([header, *(format_frame(f, True) for f in frames)]) + "\n")
            rows.append(synth.featurize(w.samples, coeffs, pipe.sample_rate_hz))
            entries.append({"index": i, "label": name, "stream": rel})
        return rows, entries

    windows = synth.synth_windows(cfg.dataset.per_class, seed, window_seconds=pipe.window_seconds,
                                  sample_rate_hz=pipe.sample_rate_hz)
    rows, entries = emit(windows, "")
    codes = [int(GaitLabel.parse(e["label"])) for e in entries]
    for e, c in zip(entries, codes):
        e["code"] = c
    _write_feature_csv(ws.features_csv, "label", codes, rows)

    anomalous = []
    if cfg.dataset.anomalous_per_kind > 0:
        awindows = synth.synth_windows(cfg.dataset.anomalous_per_kind, cfg.sub_seed("anomalous"),
                                       scenarios=synth.ANOMALY_KINDS, window_seconds=pipe.window_seconds,
                                       sample_rate_hz=pipe.sample_rate_hz)
        arows, anomalous = emit(awindows, "anomalous_")
        _write_feature_csv(ws.anomalous_csv, "kind", [e["label"] for e in anomalous], arows)

    counts = {g.title: codes.count(int(g)) for g in GaitLabel}
    manifest = {
        "config_hash": cfg.digest(),
        "versions": VERSIONS,
        "feature_columns": "label," + csv_header(),
        "counts": counts,
        "rows": entries,
        "anomalous": anomalous,
    }
    atomic_write_text(ws.data / "manifest.json", _dumps(manifest))
    return ws.report("generate", {
        "rows": len(codes),
        "counts": counts,
        "anomalous_rows": len(anomalous),
        "features_csv": str(ws.features_csv),
        "summary": f"{len(codes)} windows ({cfg.dataset.per_class} per class) and "
                   f"{len(anomalous)} anomalous windows written to {ws.data}",
    })


def cmd_train(ws: Workspace, args) -> dict:
    cfg = ws.config
    ds = _load_dataset(ws)
    tr, va, te = classifier.stratified_split(ds.labels, cfg.dataset.split, cfg.sub_seed("split"))
    result = classifier.train(ds.subset(tr), cfg.train.to_train_config(cfg.sub_seed("train")),
                              validation=ds.subset(va))
    provenance = {"config_hash": cfg.digest(), "versions": VERSIONS, "data_hash": _file_digest(ws.features_csv),
                  "best_epoch": result.best_epoch, "best_val_accuracy": result.best_val_accuracy}
    split = {"train": tr.tolist(), "validation": va.tolist(), "test": te.tolist()}
    classifier.save_model(result.model, ws.model_json, {"split": split, "provenance": provenance})
    history = [dataclasses.asdict(r) for r in result.history]
    sizes = "-".join(map(str, result.model.layer_sizes))
    return ws.report("train", {
        "model": str(ws.model_json),
        "layer_sizes": result.model.layer_sizes,
        "split_sizes": {k: len(v) for k, v in split.items()},
        "best_epoch": result.best_epoch,
        "best_val_accuracy": result.best_val_accuracy,
        "history": history,
        "summary": f"trained {sizes} on {len(tr)} windows; best epoch {result.best_epoch} "
                   f"with validation accuracy {result.best_val_accuracy:.4f}; model -> {ws.model_json}",
    })


def _export_blob(ws: Workspace, qmodel) -> bytes:
    return quantizer.export_quantized(qmodel, ws.model_blob, ws.model_header)


def cmd_quantize(ws: Workspace, args) -> dict:
    doc = _load_model_doc(ws)
    fmodel = classifier.MlpModel.from_dict(doc)
    ds = _load_dataset(ws)
    train_rows, test_rows = _split(doc, "train"), _split(doc, "test")
    qmodel = quantizer.quantize(fmodel, quantizer.calibrate(fmodel, ds.subset(train_rows)))
    qmodel.metadata["source_model"] = _file_digest(ws.model_json)
    if "anomaly" in doc:
        qmodel.metadata["anomaly"] = doc["anomaly"]
    blob = _export_blob(ws, qmodel)

    test = ds.subset(test_rows)
    f_pred = classifier.predict_batch(fmodel, fmodel.normalize(test.features))
    q_pred = quantizer.quantized_predict_batch(qmodel, qmodel.normalize(test.features))
    sizes = runtime.model_sizes(qmodel)
    return ws.report("quantize", {
        "blob": str(ws.model_blob),
        "c_array": str(ws.model_header),
        "blob_bytes": len(blob),
        "model_sizes": sizes,
        "test_agreement": float(np.mean(f_pred == q_pred)),
        "float32_test_accuracy": float(np.mean(f_pred == test.labels)),
        "int8_test_accuracy": float(np.mean(q_pred == test.labels)),
        "summary": f"int8 blob {len(blob)} B (weights {sizes['int8_bytes']} B vs {sizes['float32_bytes']} B "
                   f"float32); argmax agreement with float on test split "
                   f"{np.mean(f_pred == q_pred):.4f}; -> {ws.model_blob}",
    })


def _score_stats(scores: np.ndarray, threshold: float, above: bool) -> dict:
    if len(scores) == 0:
        return {"n": 0}
    hits = scores > threshold if above else scores <= threshold
    return {
        "n": int(len(scores)),
        "fraction_above" if above else "fraction_at_or_below": float(np.mean(hits)),
        "median": float(np.median(scores)),
        "p95": float(np.percentile(scores, 95)),
        "max": float(scores.max()),
        "min": float(scores.min()),
    }


def cmd_fit_anomaly(ws: Workspace, args) -> dict:
    cfg = ws.config
    doc = _load_model_doc(ws)
    ds = _load_dataset(ws)
    fit_set = ds.subset(_split(doc, "train"))
    indices = anomaly.select_features(fit_set, preset=cfg.anomaly.features == "preset")
    amodel = anomaly.fit(fit_set.features, indices, cfg.anomaly.clusters, cfg.sub_seed("anomaly"),
                         cfg.anomaly.threshold)
    doc["anomaly"] = amodel.to_dict()
    atomic_write_text(ws.model_json, json.dumps(doc, indent=1) + "\n")
    if ws.model_blob.exists():
        qmodel = quantizer.import_quantized(ws.model_blob)
        qmodel.metadata["anomaly"] = doc["anomaly"]
        _export_blob(ws, qmodel)

    held_out = ds.features[_split(doc, "test")]
    normal = np.array([anomaly.score(amodel, v) for v in held_out])
    abnormal = np.array([])
    if ws.anomalous_csv.exists():
        _, arows = _read_feature_csv(ws.anomalous_csv)
        abnormal = np.array([anomaly.score(amodel, v) for v in arows])
    normal_stats = _score_stats(normal, amodel.threshold, above=False)
    abnormal_stats = _score_stats(abnormal, amodel.threshold, above=True)
    summary = (f"features {list(indices)} ({cfg.anomaly.features}), K={amodel.n_clusters}, "
               f"threshold {amodel.threshold:g}; held-out normal at or below threshold: "
               f"{normal_stats.get('fraction_at_or_below', float('nan')):.3f}")
    if len(abnormal):
        summary += f"; anomalous above threshold: {abnormal_stats['fraction_above']:.3f}"
    return ws.report("fit-anomaly", {
        "indices": list(indices),
        "feature_names": [_feature_name(i) for i in indices],
        "threshold": amodel.threshold,
        "clusters": amodel.n_clusters,
        "normal_scores": normal_stats,
        "anomalous_scores": abnormal_stats,
        "summary": summary,
    })


def _feature_name(index: int) -> str:
    from gaitdiag.features import FEATURE_NAMES

    return FEATURE_NAMES[index]


def round2(value: Optional[float]) -> Optional[Decimal]:
    """Two-decimal, half-up rounding of the shortest decimal form of ``value``."""
    if value is None:
        return None
    return Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


def _cell(value: Optional[float]) -> str:
    return "n/a" if value is None else str(round2(value))


def render_metrics(report: MetricsReport, title: str) -> str:
    lines = [title, f"{'':<14}{'precision':>10}{'recall':>10}{'f1-score':>10}{'support':>9}"]
    for g, m in report.per_class.items():
        lines.append(f"{g.title:<14}{_cell(m.precision):>10}{_cell(m.recall):>10}{_cell(m.f1):>10}{m.support:>9}")
    lines.append(f"{'accuracy':<14}{'':>10}{'':>10}{_cell(report.accuracy):>10}{report.total:>9}")
    for name, avg in (("macro avg", report.macro), ("weighted avg", report.weighted)):
        lines.append(f"{name:<14}{_cell(avg['precision']):>10}{_cell(avg['recall']):>10}"
                     f"{_cell(avg['f1']):>10}{report.total:>9}")
    return "\n".join(lines)


def render_confusion(report: MetricsReport) -> str:
    pct = report.row_normalized_percent()
    names = [g.title for g in GaitLabel]
    lines = ["confusion matrix, % of each true class (rows true, columns predicted)",
             f"{'':<10}" + "".join(f"{n:>9}" for n in names)]
    for name, row in zip(names, pct):
        lines.append(f"{name:<10}" + "".join(f"{v:>9.1f}" for v in row))
    return "\n".join(lines)


def load_confusion_fixture(spec: str) -> np.ndarray:
    """``reference`` selects the bundled matrix; anything else is a JSON file path."""
    if spec == "reference":
        text = resources.files("gaitdiag").joinpath("data/reference_confusion.json").read_text("utf-8")
    else:
        text = Path(spec).read_text(encoding="utf-8")
    doc = json.loads(text)
    if "labels" in doc and doc["labels"] != [g.title for g in GaitLabel]:
        raise ValueError("fixture labels must be in Idle, Walk, Run, Hopping, Skip order")
    if "confusion" not in doc:
        raise ValueError(f"{spec}: fixture needs a 'confusion' 5x5 matrix")
    cm = np.array(doc["confusion"], dtype=np.int64)
    if cm.shape != (len(GaitLabel), len(GaitLabel)) or np.any(cm < 0):
        raise ValueError("fixture confusion must be a 5x5 matrix of non-negative counts")
    return cm


def cmd_evaluate(ws: Workspace, args) -> dict:
    if args.confusion:
        rep = classifier.metrics_from_confusion(load_confusion_fixture(args.confusion))
        text = "\n\n".join([render_metrics(rep, f"fixture {args.confusion}"), render_confusion(rep)])
        return ws.report("evaluate", {"fixture": args.confusion, "metrics": rep.to_dict(), "summary": text})

    doc = _load_model_doc(ws)
    fmodel = classifier.MlpModel.from_dict(doc)
    test = _load_dataset(ws).subset(_split(doc, "test"))
    reports = {"float32": classifier.evaluate(fmodel, test)}
    if ws.model_blob.exists():
        qmodel = quantizer.import_quantized(ws.model_blob)
        pred = quantizer.quantized_predict_batch(qmodel, qmodel.normalize(test.features))
        reports["int8"] = classifier.metrics_from_confusion(classifier.confusion_matrix(test.labels, pred))

    table = ["model     test accuracy (%)"]
    table += [f"{kind:<10}{100 * r.accuracy:>17.2f}" for kind, r in reports.items()]
    parts = ["\n".join(table)]
    for kind, r in reports.items():
        parts.append(render_metrics(r, f"{kind} model, {len(test)} held-out windows"))
        parts.append(render_confusion(r))
    return ws.report("evaluate", {
        "test_rows": len(test),
        "accuracy": {kind: r.accuracy for kind, r in reports.items()},
        "metrics": {kind: r.to_dict() for kind, r in reports.items()},
        "summary": "\n\n".join(parts),
    })


def _load_runtime_models(ws: Workspace, args):
    path = Path(args.model) if args.model else (ws.model_blob if args.int8 else ws.model_json)
    fmodel, amodel = runtime.load_models(_require(path, "train (and quantize) a model first"))
    if amodel is None:
        raise ConfigError(f"{path} has no anomaly section; run `gaitdiag fit-anomaly` first")
    return fmodel, amodel


def cmd_diagnose(ws: Workspace, args) -> dict:
    fmodel, amodel = _load_runtime_models(ws, args)
    pipe = ws.config.pipeline
    config = pipe.runtime(args.threshold)
    config.concurrent = args.concurrent
    source = sys.stdin if args.input == "-" else open(args.input, encoding="utf-8")
    out = sys.stdout
    labels, flagged, n = {}, 0, 0
    try:
        for diag in runtime.run_stream(parse_frames(source, pipe.sample_rate_hz), fmodel, amodel, config):
            n += 1
            labels[diag.label.title] = labels.get(diag.label.title, 0) + 1
            flagged += diag.anomalous
            if args.format == "text":
                line = diag.to_text()
            else:
                line = json.dumps(diag.payload() if args.no_latency else diag.to_dict(), sort_keys=True)
            out.write(line + "\n")
            out.flush()
    finally:
        if source is not sys.stdin:
            source.close()
    return ws.report("diagnose", {
        "input": args.input,
        "windows": n,
        "labels": labels,
        "anomalous_windows": flagged,
        "summary": None,
    })


def cmd_benchmark(ws: Workspace, args) -> dict:
    if args.windows < 1:
        raise ConfigError("--windows must be >= 1")
    from gaitdiag import kernels

    doc = _load_model_doc(ws)
    if "anomaly" not in doc:
        raise ConfigError(f"{ws.model_json} has no anomaly section; run `gaitdiag fit-anomaly` first")
    amodel = anomaly.AnomalyModel.from_dict(doc["anomaly"])
    models = {"float32": classifier.MlpModel.from_dict(doc)}
    if ws.model_blob.exists():
        models["int8"] = quantizer.import_quantized(ws.model_blob)
    config = ws.config.pipeline.runtime()
    seed = ws.config.sub_seed("benchmark")
    reports = {kind: runtime.benchmark(m, amodel, args.windows, seed, config) for kind, m in models.items()}
    body = {"backend": kernels.BACKEND, "windows": args.windows,
            "results": {kind: r.to_dict() for kind, r in reports.items()}}
    text = [r.to_text() for r in reports.values()]
    if "int8" in reports:
        ratio = (reports["int8"].stages["classify_us"].median
                 / reports["float32"].stages["classify_us"].median)
        body["int8_over_float32_classify_median"] = ratio
        text.append(f"int8 / float32 classify median: {ratio:.2f}")
    body["summary"] = "\n\n".join(text)
    return ws.report("benchmark", body)


# --- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON project config (unknown keys are rejected)")
    common.add_argument("--seed", type=int, help="top-level seed; overrides the config")
    common.add_argument("--out", help="workspace root for data/, models/ and reports/")
    common.add_argument("--format", choices=("text", "json"),
                        help="stdout format (default: text, or JSON lines for diagnose)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="gaitdiag", description="Wearable gait diagnosis pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("generate", parents=[common], help="write a synthetic labeled dataset")
    p.add_argument("--per-class", type=int, help="windows per gait class")
    p.add_argument("--anomalous-per-kind", type=int, help="windows per anomalous profile (0 to skip)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train the float32 classifier")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="metrics on the held-out split")
    p.add_argument("--confusion", metavar="PATH",
                   help="score a fixture confusion matrix instead ('reference' for the bundled one)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("quantize", parents=[common], help="post-training int8 quantization and export")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("fit-anomaly", parents=[common], help="fit the K-means anomaly scorer")
    p.add_argument("--clusters", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--features", choices=("preset", "auto"))
    p.set_defaults(func=cmd_fit_anomaly)

    p = sub.add_parser("diagnose", parents=[common], help="stream CSV frames through the pipeline")
    p.add_argument("input", help="CSV frame file, or - for standard input")
    p.add_argument("--model", help="model.json or .q8 blob (default: the workspace model)")
    p.add_argument("--int8", action="store_true", help="use the workspace int8 blob")
    p.add_argument("--threshold", type=float, help="anomaly threshold for this run")
    p.add_argument("--concurrent", action="store_true", help="classify and score on two threads")
    p.add_argument("--no-latency", action="store_true", help="omit timing from JSON records")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("benchmark", parents=[common], help="per-stage latency over synthetic windows")
    p.add_argument("--windows", type=int, default=100)
    p.set_defaults(func=cmd_benchmark)
    return parser


def _effective_config(args) -> ProjectConfig:
    cfg = load_config(args.config).override(seed=args.seed)
    if args.command == "generate":
        cfg = cfg.override("dataset", per_class=args.per_class, anomalous_per_kind=args.anomalous_per_kind)
    elif args.command == "train":
        cfg = cfg.override("train", epochs=args.epochs)
    elif args.command == "fit-anomaly":
        cfg = cfg.override("anomaly", clusters=args.clusters, threshold=args.threshold, features=args.features)
    return cfg.validate()


def _root(args) -> Path:
    if args.out:
        return Path(args.out)
    if args.config:
        return Path(args.config).resolve().parent
    return Path.cwd()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.format is None:
        args.format = "json" if args.command == "diagnose" else "text"
    try:
        ws = Workspace(_effective_config(args), _root(args))
        report = args.func(ws, args)
    except BrokenPipeError:
        # downstream reader went away (e.g. `| head`); not an error
        devnull = os.open(os.devnull, os.O_WRONLY)
        os.dup2(devnull, sys.stdout.fileno())
        return 0
    except ConfigError as exc:
        print(f"gaitdiag {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (GaitDiagError, OSError, ValueError) as exc:
        print(f"gaitdiag {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if args.command != "diagnose":
        if args.format == "json":
            sys.stdout.write(_dumps(report))
        else:
            print(report["summary"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
