"""K-means anomaly scoring over four selected features.

The four features are z-scored with statistics from the fit set, and each of
the six unordered pairs gets its own 2-D K-means model. A test vector's score
is the mean of the smallest and the largest nearest-centroid distance across
the six planes.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from gaitdiag import kernels
from gaitdiag.classifier import LabeledDataset
from gaitdiag.errors import DegenerateDataset, TooFewSamples, UnfittedModel
from gaitdiag.features import LAYOUT_VERSION, N_FEATURES, power_index
from gaitdiag.rng import make_rng

logger = logging.getLogger(__name__)

N_SELECTED = 4
DEFAULT_CLUSTERS = 32
DEFAULT_THRESHOLD = 3.0
MAX_ITER = 300
TOLERANCE = 1e-9
PAIRS = tuple(itertools.combinations(range(N_SELECTED), 2))

# Spectral power at bin 2 (~1.84 Hz, the walking fundamental) on x1, y1, z1, z2.
PRESET_INDICES = tuple(power_index(ch, 2) for ch in (0, 1, 2, 5))


def select_features(dataset: LabeledDataset, count: int = N_SELECTED, preset: bool = False) -> tuple:
    """Indices of the ``count`` most class-discriminative features.

    Importance is between-class over within-class variance. Ties go to the
    lower index. If no feature has any within-class spread, features are
    ranked by plain variance instead.
    """
    if preset:
        return PRESET_INDICES[:count]
    if len(dataset) == 0:
        raise DegenerateDataset("cannot select features from an empty dataset")
    x, y = dataset.features, dataset.labels
    grand = x.mean(axis=0)
    between = np.zeros(x.shape[1])
    within = np.zeros(x.shape[1])
    for c in np.unique(y):
        xc = x[y == c]
        mc = xc.mean(axis=0)
        between += len(xc) * (mc - grand) ** 2
        within += ((xc - mc) ** 2).sum(axis=0)
    if np.all(within <= 0):
        logger.warning("no within-class variance; ranking features by variance")
        score = x.var(axis=0)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            score = np.where(within > 0, between / within, np.where(between > 0, np.inf, 0.0))
    order = np.lexsort((np.arange(len(score)), -score))
    return tuple(int(i) for i in order[:count])


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia_history: list
    iterations: int


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = kernels.assign(points, points[chosen])[1]
    for _ in range(1, k):
        total = float(d2.sum())
        if total > 0:
            nxt = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        else:
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        d2 = np.minimum(d2, kernels.assign(points, points[[nxt]])[1])
    return points[chosen].copy()


def kmeans(points, k: int, rng: np.random.Generator, max_iter: int = MAX_ITER, tol: float = TOLERANCE) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    An empty cluster is re-seeded at the point farthest from its centroid
    (first such point on ties), which cannot raise the within-cluster sum.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    if len(points) < k:
        raise TooFewSamples(f"{len(points)} points for {k} clusters")
    centroids = _kmeans_pp(points, k, rng)
    history = []
    labels = np.zeros(len(points), dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        labels, d2 = kernels.assign(points, centroids)
        history.append(float(d2.sum()))
        counts = np.bincount(labels, minlength=k)
        new = np.empty_like(centroids)
        for dim in range(2):
            sums = np.bincount(labels, weights=points[:, dim], minlength=k)
            new[:, dim] = np.divide(sums, counts, out=centroids[:, dim].copy(), where=counts > 0)
        if np.any(counts == 0):
            d2 = d2.copy()
            for j in np.flatnonzero(counts == 0):
                far = int(np.argmax(d2))
                new[j] = points[far]
                d2[far] = 0.0
        shift = float(np.max(np.abs(new - centroids)))
        centroids = new
        if shift < tol:
            break
    labels, d2 = kernels.assign(points, centroids)
    history.append(float(d2.sum()))
    return KMeansResult(centroids, labels, history, it)


@dataclass
class AnomalyModel:
    indices: tuple
    centroids: Optional[np.ndarray] = None  # (6, K, 2), in z-scored units
    scale_mean: Optional[np.ndarray] = None
    scale_std: Optional[np.ndarray] = None
    threshold: float = DEFAULT_THRESHOLD
    n_clusters: int = DEFAULT_CLUSTERS
    feature_layout: str = LAYOUT_VERSION
    fit_info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.indices = tuple(int(i) for i in self.indices)
        if len(self.indices) != N_SELECTED or not all(0 <= i < N_FEATURES for i in self.indices):
            raise ValueError(f"need {N_SELECTED} indices in [0, {N_FEATURES}), got {self.indices}")

    @property
    def pairs(self) -> tuple:
        return tuple((self.indices[a], self.indices[b]) for a, b in PAIRS)

    @property
    def fitted(self) -> bool:
        return self.centroids is not None

    def to_dict(self) -> dict:
        if not self.fitted:
            raise UnfittedModel("anomaly model has not been fitted")
        return {
            "format_version": 1,
            "feature_layout": self.feature_layout,
            "indices": list(self.indices),
            "pairs": [list(p) for p in self.pairs],
            "n_clusters": self.n_clusters,
            "threshold": self.threshold,
            "scale_mean": self.scale_mean.tolist(),
            "scale_std": self.scale_std.tolist(),
            "centroids": self.centroids.tolist(),
            "fit_info": self.fit_info,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AnomalyModel":
        model = cls(
            indices=tuple(doc["indices"]),
            centroids=np.array(doc["centroids"], dtype=np.float64),
            scale_mean=np.array(doc["scale_mean"], dtype=np.float64),
            scale_std=np.array(doc["scale_std"], dtype=np.float64),
            threshold=float(doc["threshold"]),
            n_clusters=int(doc["n_clusters"]),
            feature_layout=doc["feature_layout"],
            fit_info=doc.get("fit_info", {}),
        )
        if model.centroids.shape[0] != len(PAIRS) or model.centroids.shape[2] != 2:
            raise ValueError(f"centroid array has shape {model.centroids.shape}")
        if not np.all(np.isfinite(model.centroids)):
            raise ValueError("non-finite centroid")
        return model


def fit(features, indices, clusters_k: int = DEFAULT_CLUSTERS, seed: int = 0,
        threshold: float = DEFAULT_THRESHOLD) -> AnomalyModel:
    """Fit one K-means model per feature pair on normal-gait vectors."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    model = AnomalyModel(tuple(indices), threshold=float(threshold), n_clusters=int(clusters_k))
    if clusters_k < 1:
        raise ValueError("clusters_k must be >= 1")
    if len(x) < clusters_k:
        raise TooFewSamples(f"{len(x)} samples for {clusters_k} clusters")
    sel = x[:, list(model.indices)]
    mean = sel.mean(axis=0)
    std = sel.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    z = (sel - mean) / std
    rng = make_rng(seed)
    centroids, iterations = [], []
    for a, b in PAIRS:
        res = kmeans(z[:, [a, b]], clusters_k, rng)
        centroids.append(res.centroids)
        iterations.append(res.iterations)
    model.centroids = np.stack(centroids)
    model.scale_mean, model.scale_std = mean, std
    model.fit_info = {"n_samples": int(len(x)), "seed": int(seed), "iterations": iterations}
    return model


def pair_distances(model: AnomalyModel, features) -> np.ndarray:
    """Distance to the nearest centroid in each of the six pair planes."""
    if not model.fitted:
        raise UnfittedModel("anomaly model has not been fitted")
    return kernels.pair_distances(features, np.array(model.indices, dtype=np.int64), model.scale_mean,
                                  model.scale_std, _PAIR_COLUMNS, model.centroids)


_PAIR_COLUMNS = np.array(PAIRS, dtype=np.int64)


def score(model: AnomalyModel, features) -> float:
    """Mean of the smallest and largest per-pair nearest-centroid distance."""
    d = pair_distances(model, features).tolist()
    return (min(d) + max(d)) / 2.0


def is_anomalous(model: AnomalyModel, features, threshold: Optional[float] = None):
    """``(flag, score)``; flagged only when the score strictly exceeds the threshold."""
    s = score(model, features)
    limit = model.threshold if threshold is None else threshold
    return s > limit, s
