import numpy as np
import pytest
import torch

from lae.datagen import GeneratorConfig, generate_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Tiny corpus for structural tests: 8+4+4+4 images per class."""
    out = tmp_path_factory.mktemp("data_small")
    cfg = GeneratorConfig(size=64, train=8, val=4, test=4, unseen=4, seed=7,
                          out=out)
    return generate_dataset(cfg)


@pytest.fixture(scope="session")
def trend_dataset(tmp_path_factory):
    """The desk-scale corpus used by the trend experiments: 200 per class in
    train, 40 per class elsewhere (400 train images total)."""
    out = tmp_path_factory.mktemp("data_trend")
    cfg = GeneratorConfig(size=64, train=200, val=40, test=40, unseen=40,
                          seed=7, out=out)
    return generate_dataset(cfg)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
