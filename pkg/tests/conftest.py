import numpy as np
import pytest

from gaitdiag import anomaly, classifier, quantizer, synth

ACCEPTANCE_KEY = pytest.StashKey[list]()

DATA_SEED = 7
SPLIT_SEED = 1
TRAIN_SEED = 3
ANOMALY_SEED = 5


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda l: int(l.split()[1])):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    return pytestconfig.stash[ACCEPTANCE_KEY]


@pytest.fixture(scope="session")
def gait_data():
    """75 synthetic windows per class with a stratified 60/20/20 split."""
    ds = synth.generate_dataset(75, seed=DATA_SEED)
    tr, va, te = classifier.stratified_split(ds.labels, (0.6, 0.2, 0.2), SPLIT_SEED)
    return ds, ds.subset(tr), ds.subset(va), ds.subset(te)


@pytest.fixture(scope="session")
def trained(gait_data):
    _, train, val, _ = gait_data
    return classifier.train(train, classifier.TrainConfig(seed=TRAIN_SEED), validation=val)


@pytest.fixture(scope="session")
def float_model(trained):
    return trained.model


@pytest.fixture(scope="session")
def int8_model(float_model, gait_data):
    _, train, _, _ = gait_data
    return quantizer.quantize(float_model, quantizer.calibrate(float_model, train))


@pytest.fixture(scope="session")
def anomaly_model(gait_data):
    _, train, _, _ = gait_data
    return anomaly.fit(train.features, anomaly.PRESET_INDICES, 32, seed=ANOMALY_SEED)


@pytest.fixture(scope="session")
def anomalous_features():
    feats, kinds = synth.generate_anomalous(20, seed=DATA_SEED)
    return feats, kinds


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
