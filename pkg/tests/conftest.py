"""Shared fixtures: seeded generators, tiny models and tiny synthetic datasets"""

import json

import numpy as np
import pytest

from uncertainty_localizer.data.datakit import generate
from uncertainty_localizer.nn.model import init_params
from uncertainty_localizer.utils.config import RunConfig, SyntheticSpec, TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


@pytest.fixture
def tiny_params():
    params = init_params(feature_dim=4, num_classes=3, kernel_size=3, seed=7)
    return params.replace(embed_bias=np.full(4, 0.05), cls_bias=np.array([0.1, -0.2, 0.05]))


@pytest.fixture
def tiny_spec():
    return SyntheticSpec(
        num_classes=3,
        feature_dim=8,
        num_train=6,
        num_test=3,
        min_segments=30,
        max_segments=40,
        min_instances=1,
        max_instances=2,
        min_instance_len=4,
        max_instance_len=8,
    )


@pytest.fixture
def tiny_dataset(tiny_spec):
    return generate(tiny_spec, seed=3)


@pytest.fixture
def dataset_dir(tmp_path, tiny_dataset):
    """Tiny dataset written to disk; yields the manifest path"""
    return tiny_dataset.write(tmp_path / "data")


@pytest.fixture
def tiny_train_config():
    return TrainConfig(num_segments=16, batch_size=2, steps=4, learning_rate=1e-3, log_interval=0)


@pytest.fixture
def tiny_run_config(tmp_path, tiny_train_config):
    config = RunConfig(seed=1, train=tiny_train_config)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(config.model_dump(mode="json")))
    return path
