import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from gatedfm.config import load_config
from gatedfm.data_model import FieldSchema, Instance, MiniBatch, Reduce
from gatedfm.synthetic import generate_synthetic, parse_planted, sample_synthetic_spec


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run statistical acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: statistical acceptance test, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def random_batch(schema: FieldSchema, n: int, seed: int = 0) -> MiniBatch:
    """One-hot batch with both labels present."""
    rng = np.random.default_rng(seed)
    x = np.column_stack([rng.integers(0, c, size=n) for c in schema.cardinalities])
    y = rng.integers(0, 2, size=n)
    y[0], y[1] = 0, 1
    return MiniBatch.from_arrays(schema, x, y)


@pytest.fixture
def schema():
    return FieldSchema.one_hot([3, 4, 5, 2])


@pytest.fixture
def batch(schema):
    return random_batch(schema, 16, seed=3)


@pytest.fixture
def multi_hot_schema():
    return FieldSchema(
        cardinalities=(4, 6, 3),
        multi_hot_flags=(False, True, False),
        multi_hot_reduce=Reduce.AVERAGE,
        names=("site", "tags", "hour"),
    )


@pytest.fixture
def multi_hot_batch(multi_hot_schema):
    rng = np.random.default_rng(11)
    rows = []
    for r in range(12):
        k = int(rng.integers(1, 4))
        tags = tuple(int(t) for t in rng.choice(6, size=k, replace=False))
        rows.append(Instance(((int(rng.integers(0, 4)),), tags, (int(rng.integers(0, 3)),)), r % 2))
    return MiniBatch.from_instances(multi_hot_schema, rows)


@pytest.fixture
def small_config():
    return load_config(overrides=[
        "optim.batch_size=64",
        "optim.lr=0.01",
        "model.embedding_dim=4",
        "search.epochs=2",
        "retrain.epochs=2",
        "run.seed=7",
    ])


@pytest.fixture
def synthetic_splits():
    spec = sample_synthetic_spec(
        field_count=4, categories=6, planted=parse_planted("0,1"), seed=5, presamples=5000
    )
    return generate_synthetic(spec, 600, 200)
