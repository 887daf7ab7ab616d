import numpy as np
import pytest

from library.core import PredictionLog, LabelSet


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full reference trainings")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_log(hard, num_classes, soft=None, checkpoints=None):
    hard = np.asarray(hard)
    if checkpoints is None:
        checkpoints = range(1, hard.shape[1] + 1)
    return PredictionLog(hard, tuple(checkpoints), num_classes, soft)


def one_hot_soft(hard, num_classes):
    """Soft predictions consistent with `hard`: 0.7 on the predicted class, the rest spread evenly."""
    hard = np.asarray(hard)
    rest = 0.3 / (num_classes - 1)
    soft = np.full(hard.shape + (num_classes,), rest, dtype=np.float64)
    np.put_along_axis(soft, hard[..., None], 0.7, axis=-1)
    return soft


@pytest.fixture
def small_log():
    # N=3 networks, E=2 checkpoints, T=4 examples, C=3 classes
    hard = [
        [[0, 1, 2, 0], [0, 1, 1, 2]],
        [[0, 2, 2, 1], [1, 1, 2, 2]],
        [[1, 1, 0, 1], [0, 2, 2, 2]],
    ]
    return make_log(hard, 3, soft=one_hot_soft(hard, 3))


@pytest.fixture
def small_labels():
    return LabelSet([0, 1, 2, 1], 3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
