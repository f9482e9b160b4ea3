import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("blurflow", max_examples=25, deadline=None)
settings.load_profile("blurflow")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def box(side):
    return np.full((side, side), 1.0 / side**2)


def random_kernel(rng, side):
    k = rng.random((side, side))
    return k / k.sum()


def smooth_texture(rng, shape, sigma=1.5):
    from scipy.ndimage import gaussian_filter

    t = gaussian_filter(rng.random(shape), sigma, mode="wrap")
    t -= t.min()
    return t / t.max()
