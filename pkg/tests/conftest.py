import time

import numpy as np
import pytest

from tlvcore.encoders import toy_configs
from tlvcore.model import ModelConfig, init_model
from tlvcore.synthdata import Batch, DatasetConfig, generate_dataset
from tlvcore.trainer import TrainConfig, train_run


def tiny_config(levels=2, rank=4, use_sam=True, num_sensors=2, dim=8):
    encoders = toy_configs(dim=dim, heads=2, image_layers=3, text_layers=2, vocab_size=12,
                           text_len=5, image_size=8, patch_size=4)
    return ModelConfig(encoders=encoders, num_sensors=num_sensors, uba_levels=levels,
                       uba_rank=rank, use_sam=use_sam)


def tiny_state(seed=0, perturb_up=True, **kw):
    state = init_model(tiny_config(**kw), seed)
    if perturb_up:
        rng = np.random.default_rng(seed + 100)
        for name, p in state.params.items():
            if ".up." in name:
                p.data[...] = rng.normal(0.0, 0.05, size=p.data.shape)
    return state


def tiny_batch(n=2, seed=0, num_sensors=2):
    rng = np.random.default_rng(seed)
    return Batch(
        tactile=rng.normal(size=(n, 8, 8, 3)),
        vision=rng.normal(size=(n, 8, 8, 3)),
        tokens=rng.integers(0, 12, size=(n, 5)),
        sensors=rng.integers(0, num_sensors, size=n),
        labels=rng.integers(0, 3, size=n),
        roughness=rng.integers(0, 2, size=n),
        hardness=rng.integers(0, 2, size=n),
        object_ids=np.arange(n),
    )


@pytest.fixture
def state():
    return tiny_state()


@pytest.fixture
def batch():
    return tiny_batch(4)


class Runs:
    """Lazily trained models shared by the directional criteria."""

    def __init__(self):
        self.cache = {}
        self.cost = {}

    def get(self, key, fn):
        if key not in self.cache:
            t0 = time.perf_counter()
            self.cache[key] = fn()
            self.cost[key] = time.perf_counter() - t0
        return self.cache[key]

    def dataset(self, kind, seed):
        spec = {
            "sensor": dict(num_classes=8, num_sensors=4, samples_per_cell=100, style_overlap=0.5),
            "stability": dict(num_classes=8, num_sensors=4, samples_per_cell=50, style_overlap=0.5),
            "robust": dict(num_classes=8, num_sensors=2, samples_per_cell=100, style_overlap=0.0),
        }[kind]
        return self.get(("data", kind, seed), lambda: generate_dataset(DatasetConfig(seed=seed, **spec)))

    @staticmethod
    def key(kind, seed, **overrides):
        return ("model", kind, seed, tuple(sorted(overrides.items())))

    def model(self, kind, seed, **overrides):
        ds = self.dataset(kind, seed)
        return self.get(self.key(kind, seed, **overrides), lambda: train_run(TrainConfig(seed=seed, **overrides), ds)[0])

    def seconds(self, key):
        return self.cost.get(key, 0.0)


@pytest.fixture(scope="session")
def runs():
    return Runs()
