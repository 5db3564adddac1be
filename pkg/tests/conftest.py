import numpy as np
import pytest

from stackrecon.simulate import PhantomSpec, make_phantom, make_smooth_phantom


def rel_err(got, want):
    """Max-norm relative error with a unit floor for near-zero references."""
    got = np.asarray(got, dtype=float)
    want = np.asarray(want, dtype=float)
    denom = max(np.max(np.abs(want)), 1e-12)
    return float(np.max(np.abs(got - want)) / denom)


@pytest.fixture(scope="session")
def smooth_phantom_24():
    return make_smooth_phantom((24, 24, 24), seed=7)


@pytest.fixture(scope="session")
def smooth_phantom_32():
    return make_smooth_phantom((32, 32, 32), seed=3)


@pytest.fixture(scope="session")
def class_phantom_32():
    return make_phantom(PhantomSpec(dims=(32, 32, 32), spacing=(1.0, 1.0, 1.0), seed=2))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
