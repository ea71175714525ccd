import numpy as np
import pytest

from config import Config
from numerics import RngStream
from synthset import generate_dataset

TINY = {'classes': 4, 'per_class': 6, 'seed': 3}


@pytest.fixture
def rng():
    return RngStream(1234, 'test')


@pytest.fixture
def image(rng):
    """Smooth natural-ish 64 x 64 test image with values inside (0, 1)."""
    y, x = np.mgrid[0:64, 0:64] / 63.0
    base = np.stack([0.5 + 0.3 * np.sin(3 * x), 0.5 + 0.3 * np.cos(4 * y), 0.4 + 0.2 * x * y], axis=-1)
    return np.clip(base + rng.uniform(-0.05, 0.05, base.shape), 0.0, 1.0)


@pytest.fixture(scope='session')
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp('tiny_data')
    return generate_dataset(TINY['classes'], TINY['per_class'], TINY['seed'], out)


@pytest.fixture
def tiny_config(tmp_path, tiny_dataset):
    overrides = dict(TINY, data_dir=str(tiny_dataset.root), out_dir=str(tmp_path / 'run'),
                     batch=4, epochs=1, d=8, scales=[1.0])
    return Config(overrides=overrides, use_env=False)
