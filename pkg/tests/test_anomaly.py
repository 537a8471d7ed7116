import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaitdiag import anomaly as A
from gaitdiag.classifier import LabeledDataset
from gaitdiag.errors import DegenerateDataset, TooFewSamples, UnfittedModel
from gaitdiag.features import FEATURE_NAMES
from gaitdiag.rng import make_rng

IDX = (3, 40, 100, 200)


def unit_model(centroids=None):
    """Fitted-looking model with identity scaling, so z-space equals raw feature space."""
    if centroids is None:
        centroids = np.zeros((6, 1, 2))
    return A.AnomalyModel(IDX, centroids=np.asarray(centroids, float), scale_mean=np.zeros(4),
                          scale_std=np.ones(4), n_clusters=np.shape(centroids)[1])


def vector_with(values):
    x = np.zeros(222)
    x[list(IDX)] = values
    return x


# --- feature selection ------------------------------------------------------


def test_select_features_finds_the_signal_columns():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(5), 40)
    x = rng.normal(size=(200, 222))
    signal = [7, 50, 123, 199]
    for j, col in enumerate(signal):
        x[:, col] += labels * (3.0 + j)
    got = A.select_features(LabeledDataset(x, labels))
    assert sorted(got) == signal


def test_select_features_constant_data_falls_back():
    ds = LabeledDataset(np.ones((20, 222)), np.arange(20) % 5)
    assert A.select_features(ds) == (0, 1, 2, 3)


def test_preset_is_bin_two_power_of_four_channels():
    assert A.select_features(None, preset=True) == A.PRESET_INDICES
    assert [FEATURE_NAMES[i] for i in A.PRESET_INDICES] == ["x1_p02", "y1_p02", "z1_p02", "z2_p02"]


def test_select_features_rejects_empty():
    with pytest.raises(DegenerateDataset):
        A.select_features(LabeledDataset(np.zeros((0, 222)), []))


def test_model_index_validation():
    with pytest.raises(ValueError):
        A.AnomalyModel((1, 2, 3))
    with pytest.raises(ValueError):
        A.AnomalyModel((1, 2, 3, 222))
    assert len(A.AnomalyModel(IDX).pairs) == 6


# --- K-means ----------------------------------------------------------------


def test_k1_centroid_is_the_mean():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(57, 222)) * 4 + 2
    model = A.fit(x, IDX, clusters_k=1, seed=0)
    z = (x[:, list(IDX)] - model.scale_mean) / model.scale_std
    for p, (a, b) in enumerate(A.PAIRS):
        cx = math.fsum(z[:, a]) / len(z)
        cy = math.fsum(z[:, b]) / len(z)
        assert abs(model.centroids[p, 0, 0] - cx) <= 1e-12
        assert abs(model.centroids[p, 0, 1] - cy) <= 1e-12


def test_two_blobs_are_recovered():
    rng = np.random.default_rng(2)
    a = rng.normal(scale=0.05, size=(50, 2)) + [-5.0, 0.0]
    b = rng.normal(scale=0.05, size=(50, 2)) + [5.0, 1.0]
    res = A.kmeans(np.vstack([a, b]), 2, make_rng(0))
    got = sorted(map(tuple, res.centroids))
    want = sorted([tuple(a.mean(axis=0)), tuple(b.mean(axis=0))])
    np.testing.assert_allclose(got, want, atol=1e-6)


@given(seed=st.integers(0, 10_000), k=st.integers(1, 12))
@settings(max_examples=30, deadline=None)
def test_inertia_never_increases(seed, k):
    pts = np.random.default_rng(seed).normal(size=(60, 2))
    hist = A.kmeans(pts, k, make_rng(seed)).inertia_history
    assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(hist, hist[1:]))


def test_duplicate_points_trigger_reseeding():
    pts = np.vstack([np.zeros((10, 2)), np.ones((2, 2))])
    res = A.kmeans(pts, 4, make_rng(0))
    assert np.all(np.isfinite(res.centroids))
    assert res.inertia_history[-1] == 0.0


def test_fit_is_deterministic():
    x = np.random.default_rng(3).normal(size=(80, 222))
    a, b = A.fit(x, IDX, 8, seed=11), A.fit(x, IDX, 8, seed=11)
    assert a.centroids.tobytes() == b.centroids.tobytes()
    assert A.score(a, x[0]) == A.score(b, x[0])


def test_fit_needs_enough_samples():
    with pytest.raises(TooFewSamples):
        A.fit(np.zeros((10, 222)), IDX, clusters_k=32)


# --- scoring ----------------------------------------------------------------


def test_point_on_centroids_scores_zero():
    model = unit_model()
    assert A.score(model, np.zeros(222)) == 0.0
    assert A.is_anomalous(model, np.zeros(222)) == (False, 0.0)


@pytest.mark.parametrize("d", [0.5, 3.0, 7.25])
def test_equal_distance_everywhere_scores_d(d):
    # every selected coordinate at d/sqrt(2) puts each pair at distance d from the origin
    model = unit_model()
    x = vector_with([d / math.sqrt(2)] * 4)
    np.testing.assert_allclose(A.pair_distances(model, x), [d] * 6, rtol=1e-15)
    assert A.score(model, x) == pytest.approx(d, rel=1e-15)


def test_score_is_mean_of_extremes():
    model = unit_model()
    x = vector_with([1.0, 2.0, 0.0, 0.0])
    d = A.pair_distances(model, x)
    # pair (2, 3) is at 0, pair (0, 1) at sqrt(5)
    assert min(d) == 0.0 and max(d) == pytest.approx(math.sqrt(5))
    assert A.score(model, x) == pytest.approx(math.sqrt(5) / 2)


@pytest.mark.parametrize("value, flagged", [(2.38, False), (3.0, False), (3.01, True)])
def test_threshold_is_strict(value, flagged):
    # one coordinate at 2v: three pairs at distance 2v, three at 0, so the score is exactly v
    x = vector_with([2 * value, 0.0, 0.0, 0.0])
    assert A.is_anomalous(unit_model(), x) == (flagged, value)


def test_unfitted_model_cannot_score():
    with pytest.raises(UnfittedModel):
        A.score(A.AnomalyModel(IDX), np.zeros(222))
    with pytest.raises(UnfittedModel):
        A.AnomalyModel(IDX).to_dict()


@given(direction=st.lists(st.floats(-1, 1), min_size=4, max_size=4), t=st.floats(0.0, 10.0))
@settings(max_examples=60)
def test_score_monotone_along_rays(direction, t):
    model = unit_model()
    u = np.array(direction)
    assert A.score(model, vector_with(t * u)) <= A.score(model, vector_with((t + 0.5) * u)) + 1e-12


@given(x=st.lists(st.floats(-100, 100), min_size=4, max_size=4))
def test_score_non_negative(x):
    rng = np.random.default_rng(0)
    assert A.score(unit_model(rng.normal(size=(6, 5, 2))), vector_with(x)) >= 0.0


def test_trained_model_separates_anomalies(anomaly_model, gait_data, anomalous_features):
    _, _, val, test = gait_data
    normal = np.vstack([val.features, test.features])
    normal_scores = [A.score(anomaly_model, v) for v in normal]
    odd_scores = [A.score(anomaly_model, v) for v in anomalous_features[0]]
    assert np.mean(np.array(normal_scores) <= 3.0) >= 0.95
    assert np.mean(np.array(odd_scores) > 3.0) >= 0.90


def test_round_trip(anomaly_model, gait_data):
    back = A.AnomalyModel.from_dict(anomaly_model.to_dict())
    assert back.centroids.tobytes() == anomaly_model.centroids.tobytes()
    x = gait_data[3].features[0]
    assert A.score(back, x) == A.score(anomaly_model, x)
    bad = anomaly_model.to_dict()
    bad["centroids"] = bad["centroids"][:5]
    with pytest.raises(ValueError):
        A.AnomalyModel.from_dict(bad)
