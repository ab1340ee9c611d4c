import numpy as np
import pytest

from cascade_seg.data_pipeline import PhantomSpec, generate_phantom, random_phantom_spec
from cascade_seg.volume_core import normalize_subject


@pytest.fixture(scope="session")
def phantom():
    return generate_phantom(PhantomSpec())


@pytest.fixture(scope="session")
def normalized_phantom(phantom):
    return normalize_subject(phantom)


@pytest.fixture(scope="session")
def cohort():
    return [normalize_subject(generate_phantom(random_phantom_spec(i, seed=3))) for i in range(3)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
