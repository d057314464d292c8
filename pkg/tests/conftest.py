import numpy as np
import pytest

from ansguard.datasets import synthetic_gaussians
from ansguard.detector import Detector
from ansguard.models import SCHEDULES, build, train


@pytest.fixture
def synthetic():
    return synthetic_gaussians(n=64, seed=3)


@pytest.fixture(scope="session")
def synthetic_train():
    return synthetic_gaussians(n=256, seed=11)


@pytest.fixture(scope="session")
def synthetic_test():
    return synthetic_gaussians(n=96, seed=12)


@pytest.fixture(scope="session")
def trained_tiny(synthetic_train, synthetic_test):
    """tiny_cnn fitted to the two-level synthetic set; treat as read-only."""
    model = build("tiny_cnn", classes=2, seed=5)
    train(model, synthetic_train, SCHEDULES["tiny_cnn"], seed=5, eval_set=synthetic_test)
    return model


@pytest.fixture
def random_detector():
    return Detector(in_features=12, hidden=8, layer=1, seed=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
