import numpy as np
import pytest

from cfx.classifier import CallableModel, fit_reference_classifier
from cfx.prototypes import MiningConfig, mine_prototypes
from cfx.synth import make_dataset


def threshold_model(fn, class_names, T, C, thresholds=None):
    """Model whose probabilities come from a scalar score through a steep sigmoid."""
    return CallableModel(fn, class_names, T, C, thresholds)


@pytest.fixture(scope="session")
def small_data():
    train = make_dataset(n_per_class=30, n_timesteps=300, n_channels=3, seed=11)
    query = make_dataset(n_per_class=4, n_timesteps=300, n_channels=3, seed=12, prefix="q",
                         stats=train.stats)
    return train, query


@pytest.fixture(scope="session")
def small_model(small_data):
    return fit_reference_classifier(small_data[0])


@pytest.fixture(scope="session")
def small_db(small_data, small_model):
    return mine_prototypes(small_data[0], small_model, MiningConfig(dim_range=(2, 3), k_range=(2, 4)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
