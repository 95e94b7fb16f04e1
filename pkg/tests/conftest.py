import numpy as np
import pytest

from pfnl.bank import ClassGallery, generate_synthetic


@pytest.fixture(scope="session")
def small_banks():
    """6 classes, 8 records each, dim 8, moderate noise."""
    return generate_synthetic(6, 8, 8, 2.0, seed=7)


@pytest.fixture(scope="session")
def small_gallery(small_banks):
    return ClassGallery.from_bank(small_banks[1])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
