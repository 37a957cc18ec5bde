import numpy as np
import pytest

from fedoui import nn
from fedoui.harness import ExperimentConfig


def tiny_spec(pool_stride=2, pool_size=2, image=4, channels=2, classes=3):
    layers = (
        nn.Conv2d("conv", channels, 3, 3, 1),
        nn.ReLU("relu1"),
        nn.MaxPool2d("pool", pool_size, pool_stride),
        nn.Flatten("flat"),
    )
    side = (image - pool_size) // pool_stride + 1
    flat = 3 * side * side
    layers += (nn.Linear("fc1", flat, 5), nn.ReLU("relu2"), nn.Linear("fc2", 5, classes))
    return nn.ModelSpec((channels, image, image), layers, classes, tap="fc1")


TOY = dict(method="fedoui", dataset="synthetic", n_classes=4, image_side=8, channels=2,
           synthetic_spread=2.0, conv1_channels=4, conv2_channels=8, hidden_units=16,
           n_clients=6, clients_per_round=3, rounds=5, probe_batch_size=16,
           partition="dirichlet", concentration=0.5, train_subset=400, test_subset=100, seed=0)


@pytest.fixture
def toy_config():
    return ExperimentConfig.from_dict(TOY)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
