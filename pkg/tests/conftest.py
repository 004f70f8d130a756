import numpy as np
import pytest
from hypothesis import settings

from twohand.config import Config
from twohand.losses import uniform_patch_regressor
from twohand.meshtopo import bundled_template, coarsen, dense_matching_encoding
from twohand.synthdata import generate_sample

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_template():
    return bundled_template("small")


@pytest.fixture(scope="session")
def small_hierarchy(small_template):
    return coarsen(small_template)


@pytest.fixture(scope="session")
def full_hierarchy():
    return coarsen(bundled_template("full"))


@pytest.fixture(scope="session")
def small_encoding(small_hierarchy):
    return dense_matching_encoding(small_hierarchy)


@pytest.fixture(scope="session")
def small_regressor(small_template):
    return uniform_patch_regressor(small_template.vertices)


@pytest.fixture(scope="session")
def sample(small_template, small_hierarchy):
    return generate_sample(11, small_template, small_hierarchy)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_config():
    return Config()
