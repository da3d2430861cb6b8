import numpy as np
import pytest
from hypothesis import settings

from pdqat.data import gen_synthetic
from pdqat.primal_dual import DualState, TrainRunConfig
from pdqat.quantize import QuantSpec
from pdqat.shadow import LayerSpec, ShadowModel

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def blobs():
    return gen_synthetic("blobs", 60, classes=2, noise=0.5, seed=3)


def tiny_model(bits=(2, 0), sizes=(6, 3), n_in=8, batchnorm=True, seed=0,
               dtype=np.float64, activation="clip"):
    specs = [LayerSpec(size=s) for s in sizes]
    return ShadowModel.build((n_in,), specs, QuantSpec.from_bits(list(bits)), seed, dtype,
                             batchnorm, activation)


def tiny_config(**kw):
    base = dict(layers=[LayerSpec(size=8), LayerSpec(size=8), LayerSpec(size=2)],
                bits=[0, 2, 0], epochs=3, batch_size=32, early_stop=False, dtype="float64")
    base.update(kw)
    return TrainRunConfig(**base)


def random_duals(n, rng, lr=0.01):
    return DualState(1.0 - rng.random(n), float(1.0 - rng.random()), lr)
