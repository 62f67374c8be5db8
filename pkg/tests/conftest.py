import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pdabench import datagen, nets

settings.register_profile("pdabench", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pdabench")


MICRO_DIMS = nets.NetDims(d_in=2, k_source=3, hidden=(5,), bottleneck=4, adv_hidden=3)


@pytest.fixture
def micro():
    """Two features, three classes, batch of four."""
    rng = np.random.default_rng(7)
    xs = rng.standard_normal((4, 2))
    ys = np.array([0, 1, 2, 1])
    xt = rng.standard_normal((4, 2)) + 0.5
    return xs, ys, xt


def micro_bundle(seed=3, disc=False, critic=False):
    return nets.init_bundle(MICRO_DIMS, seed, with_discriminator=disc, with_critic=critic)


@pytest.fixture(scope="session")
def small_data():
    spec = datagen.PartialShiftSpec(d=6, k_source=4, k_target=2, n_per_class_source=20,
                                    n_per_class_target=30)
    src, tgt = datagen.gen_partial_blobs(spec, 1)
    return datagen.prepare(src, tgt, 2020)
