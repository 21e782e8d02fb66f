"""Shared fixtures: the bundled cafe domain and slow-to-train models reused
across test modules."""

import importlib.resources
from pathlib import Path

import pytest

from nlgen.corpus import DatasetSplits, load_dataset, load_schema


def cafe_dir() -> Path:
    return Path(importlib.resources.files("nlgen")) / "data" / "cafe"


@pytest.fixture(scope="session")
def cafe_dataset():
    root = cafe_dir()
    return load_dataset(root), load_schema(root / "schema.json")


@pytest.fixture(scope="session")
def overfit_model(cafe_dataset):
    """A model memorizing ten examples; trained once, reused module-wide."""
    from nlgen.training import TrainConfig, train

    splits, schema = cafe_dataset
    ten = splits.train[:10]
    mini = DatasetSplits(train=ten, valid=ten, test=[])
    config = TrainConfig(hidden=16, learning_rate=0.5, lr_decay=1.0, l2=0.0,
                         dropout=0.0, max_epochs=200, patience=200, seed=0,
                         eval_every=50, max_tokens=30)
    model, report = train(mini, schema, config)
    return model, report, ten, schema
