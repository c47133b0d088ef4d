import json

import numpy as np
import pytest

from simulation.data import Dataset, synth_blobs
from simulation.nn import Conv2D, Dense, Flatten, MaxPool, ModelSpec, ReLU

# 8x8 inputs, 4 classes: small enough for multi-round runs inside unit tests.
SMALL_LAYERS = [
    {"type": "conv2d", "out_channels": 4, "kernel_h": 3, "kernel_w": 3},
    {"type": "relu"},
    {"type": "maxpool", "size": 2},
    {"type": "flatten"},
    {"type": "dense", "out_features": 4},
]


@pytest.fixture
def dense_model():
    """Flat 3-feature input, one Dense layer, 3 classes."""
    return ModelSpec((Dense(3),), (3,), 3)


@pytest.fixture
def tiny_cnn():
    return ModelSpec(
        (Conv2D(2, 3, 3), ReLU(), MaxPool(2), Flatten(), Dense(4), ReLU(), Dense(3)),
        (1, 6, 6),
        3,
    )


@pytest.fixture
def small_cnn():
    return ModelSpec((Conv2D(4, 3, 3), ReLU(), MaxPool(2), Flatten(), Dense(4)), (1, 8, 8), 4)


@pytest.fixture
def small_blobs():
    return synth_blobs(4, 30, (1, 8, 8), seed=5, sigma=0.1)


@pytest.fixture
def small_settings():
    """A raw config for a short, fast run on 8x8 blobs."""
    return {
        "seed": 3,
        "dataset": {"kind": "blobs", "num_classes": 4, "input_shape": [1, 8, 8],
                    "per_class": 40, "test_per_class": 10, "sigma": 0.1},
        "model": {"layers": [dict(layer) for layer in SMALL_LAYERS]},
        "num_participants": 8,
        "per_round": 4,
        "rounds": 3,
        "attack_start_round": 1,
        "adversary_ids": [0],
        "train": {"epochs": 1, "batch_size": 16, "learning_rate": 0.05},
        "attack": {"method": "naive"},
    }


@pytest.fixture
def write_config(tmp_path):
    """Write a raw config dict to a JSON file and return its path."""

    def _write(settings, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(settings), encoding="utf-8")
        return str(path)

    return _write


@pytest.fixture
def zero_input_dataset():
    def _make(n, shape=(1, 8, 8), num_classes=4):
        labels = np.arange(n) % num_classes
        return Dataset(np.zeros((n,) + tuple(shape), dtype=np.float32), labels, num_classes, shape)

    return _make
